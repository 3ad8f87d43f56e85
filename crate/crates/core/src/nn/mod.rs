//! Neural core: layers, seeded initialization, forward/backward passes,
//! losses, vanilla SGD, and splitting a topology into contiguous trainable
//! segments.

pub mod init;
pub mod layer;
pub mod loss;
pub mod segment;
pub mod topology;
pub mod weights;

pub use init::{initialize, InitScheme, Initializer};
pub use layer::{LayerSpec, LossKind};
pub use loss::{loss_and_gradient, validate_one_hot};
pub use segment::{split, LayerGrads, SegmentNet};
pub use topology::{NetError, NetworkTopology};
pub use weights::{weight_bytes, weight_digest};

use crate::tensor::Tensor;

/// A training batch: `(batch, input_dim)` data plus optional one-hot labels.
#[derive(Debug, Clone)]
pub struct Batch {
    data: Tensor,
    label: Option<Tensor>,
}

impl Batch {
    pub fn new(data: Tensor, label: Option<Tensor>) -> Result<Self, NetError> {
        if data.rank() != 2 {
            return Err(NetError::GradientShapeMismatch {
                expected: vec![0, 0],
                got: data.shape().to_vec(),
            });
        }
        if let Some(l) = &label {
            if l.rank() != 2 || l.rows() != data.rows() {
                return Err(NetError::GradientShapeMismatch {
                    expected: vec![data.rows(), 0],
                    got: l.shape().to_vec(),
                });
            }
            validate_one_hot(l)?;
        }
        Ok(Batch { data, label })
    }

    pub fn unlabeled(data: Tensor) -> Result<Self, NetError> {
        Batch::new(data, None)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn label(&self) -> Option<&Tensor> {
        self.label.as_ref()
    }

    pub fn size(&self) -> usize {
        self.data.rows()
    }
}
