//! Layer kinds. A topology is an ordered list of these; loss heads are
//! ordinary layers (identity in forward/backward) so a segment split can hand
//! the head to whichever party computes the loss.

use crate::tensor::{Tensor, TensorError};

/// Loss attached to a head layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquared,
}

#[derive(Debug, Clone)]
pub enum LayerSpec {
    FullyConnected {
        weight: Tensor,       // (in_dim, out_dim)
        bias: Option<Tensor>, // (out_dim)
    },
    Relu,
    Sigmoid,
    SoftmaxCrossEntropyHead,
    MeanSquaredHead,
}

impl LayerSpec {
    /// Zero-initialized fully-connected layer; parameters are drawn later by
    /// an [`crate::nn::Initializer`].
    pub fn fully_connected(
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Result<LayerSpec, TensorError> {
        Ok(LayerSpec::FullyConnected {
            weight: Tensor::zeros(vec![in_dim, out_dim])?,
            bias: if with_bias {
                Some(Tensor::zeros(vec![out_dim])?)
            } else {
                None
            },
        })
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::FullyConnected { .. })
    }

    pub fn is_head(&self) -> bool {
        matches!(
            self,
            LayerSpec::SoftmaxCrossEntropyHead | LayerSpec::MeanSquaredHead
        )
    }

    pub fn loss_kind(&self) -> Option<LossKind> {
        match self {
            LayerSpec::SoftmaxCrossEntropyHead => Some(LossKind::SoftmaxCrossEntropy),
            LayerSpec::MeanSquaredHead => Some(LossKind::MeanSquared),
            _ => None,
        }
    }

    /// Input dimension, when the layer constrains it.
    pub fn in_dim(&self) -> Option<usize> {
        match self {
            LayerSpec::FullyConnected { weight, .. } => Some(weight.shape()[0]),
            _ => None,
        }
    }

    /// Output dimension given an input dimension.
    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            LayerSpec::FullyConnected { weight, .. } => weight.shape()[1],
            _ => in_dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::SoftmaxCrossEntropyHead => "softmax-head",
            LayerSpec::MeanSquaredHead => "mse-head",
        }
    }

    /// Parameter tensors in canonical order (weight, then bias).
    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            LayerSpec::FullyConnected { weight, bias } => {
                let mut v = vec![weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            _ => Vec::new(),
        }
    }
}
