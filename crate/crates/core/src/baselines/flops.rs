//! Analytic flop model.
//!
//! # Formula sheet
//!
//! Multiplies and adds count as separate flops (the factor-2 convention), so
//! an `m x k` by `k x n` matrix product costs `2*m*k*n`.
//!
//! Per layer, batch size `b`:
//!
//! | layer                | forward                  | backward                                    |
//! |----------------------|--------------------------|---------------------------------------------|
//! | fully-connected      | `2*b*in*out` (+`b*out` bias adds) | `2*b*in*out` weight grads + `2*b*in*out` input grads (+`b*out` bias grads) + `2*in*out` (+`2*out`) SGD update |
//! | relu / sigmoid       | `b*width`                | `b*width`                                   |
//! | loss heads           | `b*width`                | `b*width`                                   |
//!
//! Evaluation passes are not charged to training ledgers.

use crate::nn::{LayerSpec, NetworkTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    ForwardBackward,
}

/// Flops of one `m x k` by `k x n` matrix product.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

fn fc_flops(in_dim: usize, out_dim: usize, with_bias: bool, batch: usize, pass: Pass) -> u64 {
    let (b, i, o) = (batch as u64, in_dim as u64, out_dim as u64);
    let forward = 2 * b * i * o + if with_bias { b * o } else { 0 };
    match pass {
        Pass::Forward => forward,
        Pass::ForwardBackward => {
            let weight_grads = 2 * b * i * o;
            let input_grads = 2 * b * i * o;
            let bias_grads = if with_bias { b * o } else { 0 };
            let update = 2 * i * o + if with_bias { 2 * o } else { 0 };
            forward + weight_grads + input_grads + bias_grads + update
        }
    }
}

fn activation_flops(width: usize, batch: usize, pass: Pass) -> u64 {
    let per_pass = (batch as u64) * (width as u64);
    match pass {
        Pass::Forward => per_pass,
        Pass::ForwardBackward => 2 * per_pass,
    }
}

/// Flops of a contiguous layer slice. `input_dim` seeds the width tracking
/// for slices that begin with dimension-preserving layers.
pub fn segment_flops(layers: &[LayerSpec], input_dim: usize, batch: usize, pass: Pass) -> u64 {
    let mut width = input_dim;
    let mut total = 0u64;
    for layer in layers {
        match layer {
            LayerSpec::FullyConnected { weight, bias } => {
                let (i, o) = (weight.shape()[0], weight.shape()[1]);
                total += fc_flops(i, o, bias.is_some(), batch, pass);
                width = o;
            }
            LayerSpec::Relu
            | LayerSpec::Sigmoid
            | LayerSpec::SoftmaxCrossEntropyHead
            | LayerSpec::MeanSquaredHead => {
                total += activation_flops(width, batch, pass);
            }
        }
    }
    total
}

/// Flops of the whole topology.
pub fn topology_flops(topology: &NetworkTopology, batch: usize, pass: Pass) -> u64 {
    let input_dim = topology.input_dim().unwrap_or(0);
    segment_flops(topology.layers(), input_dim, batch, pass)
}

/// Client-side flops per training step when the topology is cut after layer
/// `cut` (the client holds layers `0..=cut`).
pub fn split_client_flops(
    topology: &NetworkTopology,
    cut: usize,
    batch: usize,
    pass: Pass,
) -> u64 {
    let input_dim = topology.input_dim().unwrap_or(0);
    segment_flops(&topology.layers()[..=cut], input_dim, batch, pass)
}
