//! Network topologies: ordered layer lists with dimension validation, plus
//! the branched autoencoder arrangement where an encoder output feeds both a
//! local decoder and the remote classifier tail.

use thiserror::Error;

use crate::nn::layer::LayerSpec;
use crate::nn::weights;
use crate::tensor::{TensorChecksum, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {index}: input dim {got} does not match previous output dim {expected}")]
    AdjacencyMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("loss head at layer {0} must be the last layer of the topology")]
    HeadNotLast(usize),
    #[error("topology has no layers")]
    EmptyTopology,
    #[error("cannot infer a required dimension from unparameterized layers")]
    CannotInferDims,
    #[error("invalid cut indices {cuts:?} for topology with last layer index {last}")]
    InvalidCut { cuts: Vec<usize>, last: usize },
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("upstream gradient shape {got:?} does not match cached forward output {expected:?}")]
    GradientShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input dim {got} does not match layer expecting {expected}")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("parameter shape mismatch at layer {0}")]
    ParameterShapeMismatch(usize),
    #[error("layer {index} is not a fully-connected layer")]
    NotFullyConnected { index: usize },
    #[error("permutation of length {got} does not match layer output dim {expected}, or is not a bijection")]
    PermutationInvalid { expected: usize, got: usize },
    #[error("no parameterized layer follows layer {0} to absorb the inverse permutation")]
    NoDownstreamLayer(usize),
    #[error("malformed weight file: {0}")]
    WeightFormat(String),
    #[error("label target is not one-hot at row {0}")]
    NotOneHot(usize),
    #[error("labels required but absent")]
    MissingLabels,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Walks a contiguous layer list, validating internal adjacency. Returns the
/// inferred (input_dim, output_dim); either may be None when no layer in the
/// slice constrains it.
fn chain_dims(
    layers: &[LayerSpec],
    base_index: usize,
) -> Result<(Option<usize>, Option<usize>), NetError> {
    let mut input_dim: Option<usize> = None;
    let mut current: Option<usize> = None;
    for (i, layer) in layers.iter().enumerate() {
        if let Some(required) = layer.in_dim() {
            match current {
                Some(d) if d != required => {
                    return Err(NetError::AdjacencyMismatch {
                        index: base_index + i,
                        expected: d,
                        got: required,
                    });
                }
                Some(_) => {}
                None => input_dim = Some(required),
            }
            current = Some(layer.out_dim(required));
        } else if let Some(d) = current {
            current = Some(layer.out_dim(d));
        }
    }
    Ok((input_dim, current))
}

fn check_heads(layers: &[LayerSpec]) -> Result<(), NetError> {
    for (i, layer) in layers.iter().enumerate() {
        if layer.is_head() && i + 1 != layers.len() {
            return Err(NetError::HeadNotLast(i));
        }
    }
    Ok(())
}

/// An ordered list of layers. `branch`, when set to `(m, n)`, marks the
/// autoencoder arrangement: layers `0..=m` are the encoder, `m+1..=n` the
/// decoder, and `n+1..` consume the *encoder* output (not the decoder's).
#[derive(Debug, Clone)]
pub struct NetworkTopology {
    layers: Vec<LayerSpec>,
    branch: Option<(usize, usize)>,
}

impl NetworkTopology {
    /// A plain feed-forward chain: adjacent layer dimensions must agree and a
    /// loss head may only appear in final position.
    pub fn chain(layers: Vec<LayerSpec>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::EmptyTopology);
        }
        check_heads(&layers)?;
        chain_dims(&layers, 0)?;
        Ok(NetworkTopology {
            layers,
            branch: None,
        })
    }

    /// Autoencoder arrangement for semi-supervised training. Validates each
    /// sub-chain, that the encoder output feeds both the decoder and the
    /// classifier tail, and that the decoder reconstructs the input dimension.
    pub fn branched_autoencoder(
        layers: Vec<LayerSpec>,
        m: usize,
        n: usize,
    ) -> Result<Self, NetError> {
        let last = layers.len().saturating_sub(1);
        if layers.is_empty() || !(0 < m && m < n && n < last) {
            return Err(NetError::InvalidCut {
                cuts: vec![m, n],
                last,
            });
        }
        check_heads(&layers)?;
        let (enc_in, enc_out) = chain_dims(&layers[..=m], 0)?;
        let (dec_in, dec_out) = chain_dims(&layers[m + 1..=n], m + 1)?;
        let (tail_in, _) = chain_dims(&layers[n + 1..], n + 1)?;
        let enc_in = enc_in.ok_or(NetError::CannotInferDims)?;
        let enc_out = enc_out.ok_or(NetError::CannotInferDims)?;
        let dec_out = dec_out.ok_or(NetError::CannotInferDims)?;
        if let Some(d) = dec_in {
            if d != enc_out {
                return Err(NetError::AdjacencyMismatch {
                    index: m + 1,
                    expected: enc_out,
                    got: d,
                });
            }
        }
        if let Some(d) = tail_in {
            if d != enc_out {
                return Err(NetError::AdjacencyMismatch {
                    index: n + 1,
                    expected: enc_out,
                    got: d,
                });
            }
        }
        if dec_out != enc_in {
            return Err(NetError::AdjacencyMismatch {
                index: n,
                expected: enc_in,
                got: dec_out,
            });
        }
        Ok(NetworkTopology {
            layers,
            branch: Some((m, n)),
        })
    }

    pub(crate) fn from_layers_unchecked(
        layers: Vec<LayerSpec>,
        branch: Option<(usize, usize)>,
    ) -> Self {
        NetworkTopology { layers, branch }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn branch(&self) -> Option<(usize, usize)> {
        self.branch
    }

    /// Index of the last layer.
    pub fn last_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> Option<usize> {
        chain_dims(&self.layers, 0).ok().and_then(|(i, _)| i)
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        weights::weight_bytes(&self.layers)
    }

    pub fn weight_digest(&self) -> TensorChecksum {
        weights::weight_digest(&self.layers)
    }

    pub fn loss_kind(&self) -> Option<crate::nn::layer::LossKind> {
        self.layers.last().and_then(|l| l.loss_kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rejects_dim_mismatch() {
        let layers = vec![
            LayerSpec::fully_connected(4, 6, true).unwrap(),
            LayerSpec::fully_connected(5, 3, true).unwrap(),
        ];
        assert!(matches!(
            NetworkTopology::chain(layers),
            Err(NetError::AdjacencyMismatch {
                index: 1,
                expected: 6,
                got: 5
            })
        ));
    }

    #[test]
    fn chain_accepts_valid_with_activations() {
        let layers = vec![
            LayerSpec::fully_connected(4, 6, true).unwrap(),
            LayerSpec::Relu,
            LayerSpec::fully_connected(6, 3, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
        ];
        let topo = NetworkTopology::chain(layers).unwrap();
        assert_eq!(topo.input_dim(), Some(4));
        assert_eq!(topo.last_index(), 3);
    }

    #[test]
    fn head_must_be_last() {
        let layers = vec![
            LayerSpec::fully_connected(4, 6, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
            LayerSpec::Relu,
        ];
        assert!(matches!(
            NetworkTopology::chain(layers),
            Err(NetError::HeadNotLast(1))
        ));
    }

    #[test]
    fn branched_autoencoder_validates_branch_dims() {
        // encoder 8 -> 4 (layers 0..=1), decoder 4 -> 8 (2..=3), tail takes 4.
        let layers = vec![
            LayerSpec::fully_connected(8, 4, true).unwrap(),
            LayerSpec::Relu,
            LayerSpec::fully_connected(4, 8, true).unwrap(),
            LayerSpec::Sigmoid,
            LayerSpec::fully_connected(4, 3, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
        ];
        let topo = NetworkTopology::branched_autoencoder(layers, 1, 3).unwrap();
        assert_eq!(topo.branch(), Some((1, 3)));

        // Decoder failing to reconstruct the input dim is rejected.
        let bad = vec![
            LayerSpec::fully_connected(8, 4, true).unwrap(),
            LayerSpec::Relu,
            LayerSpec::fully_connected(4, 7, true).unwrap(),
            LayerSpec::Sigmoid,
            LayerSpec::fully_connected(4, 3, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
        ];
        assert!(NetworkTopology::branched_autoencoder(bad, 1, 3).is_err());
    }
}
