//! Seeded, order-independent parameter initialization.
//!
//! Parameters are drawn from a counter-based generator: element `i` of the
//! weight tensor in layer `l` is a pure function of `(seed, l, i)`. Two
//! parties holding the same `(scheme, seed, topology)` triple therefore
//! construct bitwise-identical parameters without coordinating draw order.

use sha2::{Digest, Sha256};

use crate::nn::layer::LayerSpec;
use crate::nn::topology::NetworkTopology;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    XavierUniform,
    Gaussian { mean: f64, stddev: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Initializer {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl Initializer {
    pub fn xavier(seed: u64) -> Self {
        Initializer {
            scheme: InitScheme::XavierUniform,
            seed,
        }
    }

    pub fn gaussian(seed: u64, mean: f64, stddev: f64) -> Self {
        Initializer {
            scheme: InitScheme::Gaussian { mean, stddev },
            seed,
        }
    }
}

/// Two uniform draws in [0,1) and (0,1], derived from SHA-256 of
/// (seed, layer, element).
fn counter_uniforms(seed: u64, layer: u32, element: u64) -> (f64, f64) {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_be_bytes());
    hasher.update(layer.to_be_bytes());
    hasher.update(element.to_be_bytes());
    let digest = hasher.finalize();
    let a = u64::from_be_bytes(digest[0..8].try_into().unwrap());
    let b = u64::from_be_bytes(digest[8..16].try_into().unwrap());
    // 53 mantissa bits; u1 in [0,1), u2 in (0,1].
    let u1 = (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = ((b >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    (u1, u2)
}

fn draw(scheme: InitScheme, fan_in: usize, fan_out: usize, u1: f64, u2: f64) -> f64 {
    match scheme {
        InitScheme::XavierUniform => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (2.0 * u1 - 1.0) * limit
        }
        InitScheme::Gaussian { mean, stddev } => {
            // Box-Muller; u2 > 0 by construction.
            let z = (-2.0 * u2.ln()).sqrt() * (2.0 * std::f64::consts::PI * u1).cos();
            mean + stddev * z
        }
    }
}

/// Draws all fully-connected weights of `topology` from the scheme; biases
/// stay zero. Layer index keys the generator, so identical `(scheme, seed)`
/// pairs reproduce identical parameters however construction is ordered.
pub fn initialize(topology: &NetworkTopology, init: Initializer) -> NetworkTopology {
    let layers = topology
        .layers()
        .iter()
        .enumerate()
        .map(|(li, layer)| match layer {
            LayerSpec::FullyConnected { weight, bias } => {
                let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
                let data: Vec<f64> = (0..weight.len())
                    .map(|i| {
                        let (u1, u2) = counter_uniforms(init.seed, li as u32, i as u64);
                        draw(init.scheme, fan_in, fan_out, u1, u2)
                    })
                    .collect();
                LayerSpec::FullyConnected {
                    weight: crate::tensor::Tensor::new(weight.shape().to_vec(), data)
                        .expect("init preserves shape"),
                    bias: bias
                        .as_ref()
                        .map(|b| crate::tensor::Tensor::zeros(b.shape().to_vec()).unwrap()),
                }
            }
            other => other.clone(),
        })
        .collect();
    NetworkTopology::from_layers_unchecked(layers, topology.branch())
}
