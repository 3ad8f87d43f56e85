//! Functionally equivalent reparameterizations: permuting a fully-connected
//! layer's outputs while inverse-permuting the next parameterized layer's
//! inputs leaves the network function unchanged but produces a distinct
//! weight configuration.

use crate::nn::{LayerSpec, NetError, SegmentNet};
use crate::tensor::Tensor;

fn is_bijection(perm: &[usize]) -> bool {
    let n = perm.len();
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Returns a new segment in which output `j` of the named fully-connected
/// layer is moved to position `permutation[j]` and the next parameterized
/// layer's input rows are moved to match. Intervening elementwise layers
/// commute with the permutation; outputs agree with the original up to
/// floating-point reassociation.
pub fn permuted_equivalent(
    segment: &SegmentNet,
    layer_index: usize,
    permutation: &[usize],
) -> Result<SegmentNet, NetError> {
    let layers = segment.layers();
    let out_dim = match layers.get(layer_index) {
        Some(LayerSpec::FullyConnected { weight, .. }) => weight.shape()[1],
        _ => return Err(NetError::NotFullyConnected { index: layer_index }),
    };
    if permutation.len() != out_dim || !is_bijection(permutation) {
        return Err(NetError::PermutationInvalid {
            expected: out_dim,
            got: permutation.len(),
        });
    }
    let next_fc = layers
        .iter()
        .enumerate()
        .skip(layer_index + 1)
        .find(|(_, l)| l.is_parameterized())
        .map(|(i, _)| i)
        .ok_or(NetError::NoDownstreamLayer(layer_index))?;

    let mut new_layers = layers.to_vec();

    if let LayerSpec::FullyConnected { weight, bias } = &mut new_layers[layer_index] {
        let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
        let mut w = vec![0.0f64; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                w[i * cols + permutation[j]] = weight.at(i, j);
            }
        }
        *weight = Tensor::new(vec![rows, cols], w)?;
        if let Some(b) = bias {
            let mut nb = vec![0.0f64; cols];
            for j in 0..cols {
                nb[permutation[j]] = b.data()[j];
            }
            *b = Tensor::new(vec![cols], nb)?;
        }
    }

    if let LayerSpec::FullyConnected { weight, .. } = &mut new_layers[next_fc] {
        let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
        if rows != out_dim {
            return Err(NetError::PermutationInvalid {
                expected: rows,
                got: out_dim,
            });
        }
        let mut w = vec![0.0f64; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                w[permutation[i] * cols + j] = weight.at(i, j);
            }
        }
        *weight = Tensor::new(vec![rows, cols], w)?;
    }

    Ok(SegmentNet::from_layers(new_layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{initialize, Initializer, LayerSpec, NetworkTopology};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn seeded_segment(seed: u64) -> SegmentNet {
        let topo = NetworkTopology::chain(vec![
            LayerSpec::fully_connected(5, 7, true).unwrap(),
            LayerSpec::Relu,
            LayerSpec::fully_connected(7, 6, true).unwrap(),
            LayerSpec::Sigmoid,
            LayerSpec::fully_connected(6, 4, true).unwrap(),
        ])
        .unwrap();
        SegmentNet::whole(&initialize(&topo, Initializer::xavier(seed)))
    }

    fn random_input(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn identity_permutation_is_bitwise_identical() {
        let seg = seeded_segment(1);
        let perm: Vec<usize> = (0..7).collect();
        let permuted = permuted_equivalent(&seg, 0, &perm).unwrap();
        assert_eq!(permuted.weight_digest(), seg.weight_digest());
    }

    #[test]
    fn random_permutation_preserves_function_and_changes_digest() {
        let seg = seeded_segment(2);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for layer_index in [0usize, 2] {
            let out_dim = match &seg.layers()[layer_index] {
                LayerSpec::FullyConnected { weight, .. } => weight.shape()[1],
                _ => unreachable!(),
            };
            let mut perm: Vec<usize> = (0..out_dim).collect();
            perm.shuffle(&mut rng);
            let permuted = permuted_equivalent(&seg, layer_index, &perm).unwrap();

            let x = random_input(7, 20, 5);
            let y0 = seg.clone().forward(&x).unwrap();
            let y1 = permuted.clone().forward(&x).unwrap();
            let max_diff = y0
                .data()
                .iter()
                .zip(y1.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1e-12, "max diff {max_diff}");
            if perm.iter().enumerate().any(|(i, &p)| i != p) {
                assert_ne!(permuted.weight_digest(), seg.weight_digest());
            }
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let seg = seeded_segment(3);
        assert!(matches!(
            permuted_equivalent(&seg, 1, &[0]),
            Err(NetError::NotFullyConnected { index: 1 })
        ));
        assert!(matches!(
            permuted_equivalent(&seg, 0, &[0, 1, 2]),
            Err(NetError::PermutationInvalid { .. })
        ));
        assert!(matches!(
            permuted_equivalent(&seg, 0, &[0, 0, 1, 2, 3, 4, 5]),
            Err(NetError::PermutationInvalid { .. })
        ));
        // Last layer has no downstream parameterized layer.
        assert!(matches!(
            permuted_equivalent(&seg, 4, &[0, 1, 2, 3]),
            Err(NetError::NoDownstreamLayer(4))
        ));
    }
}
