//! Trainable contiguous slices of a topology with forward/backward state.
//!
//! A segment owns its layers' parameters. Forward caches per-layer
//! activations; backward consumes that cache, applies vanilla SGD in reverse
//! layer order, and returns the gradient with respect to the segment input.

use crate::nn::layer::LayerSpec;
use crate::nn::topology::{NetError, NetworkTopology};
use crate::nn::weights;
use crate::tensor::{Tensor, TensorChecksum};

enum LayerCache {
    Fc { input: Tensor },
    Relu { input: Tensor },
    Sigmoid { output: Tensor },
    Head,
}

struct ForwardCache {
    per_layer: Vec<LayerCache>,
    output_shape: Vec<usize>,
}

/// Parameter gradients of one fully-connected layer, recorded by the most
/// recent backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    /// Index of the layer within the segment.
    pub layer_index: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub struct SegmentNet {
    layers: Vec<LayerSpec>,
    cache: Option<ForwardCache>,
    last_grads: Vec<LayerGrads>,
}

impl Clone for SegmentNet {
    fn clone(&self) -> Self {
        // Forward caches and recorded gradients are per-instance scratch
        // state; cloning copies parameters only.
        SegmentNet {
            layers: self.layers.clone(),
            cache: None,
            last_grads: Vec::new(),
        }
    }
}

impl std::fmt::Debug for SegmentNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kinds: Vec<&str> = self.layers.iter().map(|l| l.kind_name()).collect();
        write!(f, "SegmentNet{kinds:?}")
    }
}

impl SegmentNet {
    pub fn from_layers(layers: Vec<LayerSpec>) -> Self {
        SegmentNet {
            layers,
            cache: None,
            last_grads: Vec::new(),
        }
    }

    /// The whole topology as a single segment (the monolithic trainer).
    pub fn whole(topology: &NetworkTopology) -> Self {
        SegmentNet::from_layers(topology.layers().to_vec())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Loss kind of the trailing head layer, if present.
    pub fn loss_kind(&self) -> Option<crate::nn::layer::LossKind> {
        self.layers.last().and_then(|l| l.loss_kind())
    }

    /// Parameter gradients recorded by the most recent backward pass, in
    /// ascending layer order.
    pub fn last_grads(&self) -> &[LayerGrads] {
        &self.last_grads
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        weights::weight_bytes(&self.layers)
    }

    pub fn weight_digest(&self) -> TensorChecksum {
        weights::weight_digest(&self.layers)
    }

    pub fn load_weight_bytes(&mut self, bytes: &[u8]) -> Result<(), NetError> {
        weights::apply_weight_bytes(&mut self.layers, bytes)
    }

    /// Copies parameters from another segment with identical structure.
    pub fn copy_params_from(&mut self, other: &SegmentNet) -> Result<(), NetError> {
        if self.layers.len() != other.layers.len() {
            return Err(NetError::ParameterShapeMismatch(0));
        }
        for (li, (dst, src)) in self.layers.iter_mut().zip(other.layers.iter()).enumerate() {
            match (dst, src) {
                (
                    LayerSpec::FullyConnected { weight: wd, bias: bd },
                    LayerSpec::FullyConnected { weight: ws, bias: bs },
                ) => {
                    if wd.shape() != ws.shape() {
                        return Err(NetError::ParameterShapeMismatch(li));
                    }
                    *wd = ws.clone();
                    match (bd, bs) {
                        (Some(d), Some(s)) => {
                            if d.shape() != s.shape() {
                                return Err(NetError::ParameterShapeMismatch(li));
                            }
                            *d = s.clone();
                        }
                        (None, None) => {}
                        _ => return Err(NetError::ParameterShapeMismatch(li)),
                    }
                }
                (a, b) if a.kind_name() == b.kind_name() => {}
                _ => return Err(NetError::ParameterShapeMismatch(li)),
            }
        }
        Ok(())
    }

    /// All parameter tensors in layer order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.parameters().into_iter().cloned())
            .collect()
    }

    /// Replaces all parameters from a layer-ordered tensor list.
    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<(), NetError> {
        let mut idx = 0;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            if let LayerSpec::FullyConnected { weight, bias } = layer {
                let w = params.get(idx).ok_or(NetError::ParameterShapeMismatch(li))?;
                if w.shape() != weight.shape() {
                    return Err(NetError::ParameterShapeMismatch(li));
                }
                *weight = w.clone();
                idx += 1;
                if let Some(b) = bias {
                    let nb = params.get(idx).ok_or(NetError::ParameterShapeMismatch(li))?;
                    if nb.shape() != b.shape() {
                        return Err(NetError::ParameterShapeMismatch(li));
                    }
                    *b = nb.clone();
                    idx += 1;
                }
            }
        }
        if idx != params.len() {
            return Err(NetError::ParameterShapeMismatch(idx));
        }
        Ok(())
    }

    /// Forward pass over a `(batch, dim)` input. Activations are cached for
    /// the matching backward pass; an empty segment is the identity.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NetError> {
        if input.rank() != 2 {
            return Err(NetError::GradientShapeMismatch {
                expected: vec![0, 0],
                got: input.shape().to_vec(),
            });
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            match layer {
                LayerSpec::FullyConnected { weight, bias } => {
                    if x.cols() != weight.shape()[0] {
                        return Err(NetError::InputDimMismatch {
                            expected: weight.shape()[0],
                            got: x.cols(),
                        });
                    }
                    let mut y = x.matmul(weight)?;
                    if let Some(b) = bias {
                        let (rows, cols) = (y.rows(), y.cols());
                        let mut data = y.data().to_vec();
                        for i in 0..rows {
                            for j in 0..cols {
                                data[i * cols + j] += b.data()[j];
                            }
                        }
                        y = Tensor::new(vec![rows, cols], data)?;
                    }
                    per_layer.push(LayerCache::Fc { input: x });
                    x = y;
                }
                LayerSpec::Relu => {
                    let y = x.map(|v| if v > 0.0 { v } else { 0.0 })?;
                    per_layer.push(LayerCache::Relu { input: x });
                    x = y;
                }
                LayerSpec::Sigmoid => {
                    let y = x.map(|v| 1.0 / (1.0 + (-v).exp()))?;
                    per_layer.push(LayerCache::Sigmoid { output: y.clone() });
                    x = y;
                }
                LayerSpec::SoftmaxCrossEntropyHead | LayerSpec::MeanSquaredHead => {
                    per_layer.push(LayerCache::Head);
                }
            }
        }
        self.cache = Some(ForwardCache {
            per_layer,
            output_shape: x.shape().to_vec(),
        });
        Ok(x)
    }

    /// Backward pass: updates parameters by `w <- w - lr * grad` in reverse
    /// layer order and returns the gradient with respect to the segment
    /// input. Requires (and consumes) the cache of a matching forward pass.
    pub fn backward(&mut self, upstream: &Tensor, lr: f64) -> Result<Tensor, NetError> {
        let cache = self.cache.take().ok_or(NetError::NoForwardCache)?;
        if upstream.shape() != cache.output_shape.as_slice() {
            return Err(NetError::GradientShapeMismatch {
                expected: cache.output_shape,
                got: upstream.shape().to_vec(),
            });
        }
        let mut grads_rev: Vec<LayerGrads> = Vec::new();
        let mut g = upstream.clone();
        for (li, (layer, lc)) in self
            .layers
            .iter_mut()
            .zip(cache.per_layer.iter())
            .enumerate()
            .rev()
        {
            match (layer, lc) {
                (LayerSpec::FullyConnected { weight, bias }, LayerCache::Fc { input }) => {
                    let d_weight = input.transpose()?.matmul(&g)?;
                    let d_input = g.matmul(&weight.transpose()?)?;
                    let d_bias = match bias {
                        Some(_) => {
                            let (rows, cols) = (g.rows(), g.cols());
                            let mut db = vec![0.0f64; cols];
                            for i in 0..rows {
                                for j in 0..cols {
                                    db[j] += g.at(i, j);
                                }
                            }
                            Some(Tensor::new(vec![cols], db)?)
                        }
                        None => None,
                    };
                    *weight = weight.sub(&d_weight.scale(lr)?)?;
                    if let (Some(b), Some(db)) = (bias.as_mut(), d_bias.as_ref()) {
                        *b = b.sub(&db.scale(lr)?)?;
                    }
                    grads_rev.push(LayerGrads {
                        layer_index: li,
                        weight: d_weight,
                        bias: d_bias,
                    });
                    g = d_input;
                }
                (LayerSpec::Relu, LayerCache::Relu { input }) => {
                    g = g.zip_mask(input)?;
                }
                (LayerSpec::Sigmoid, LayerCache::Sigmoid { output }) => {
                    let deriv = output.map(|y| y * (1.0 - y))?;
                    g = g.mul(&deriv)?;
                }
                (
                    LayerSpec::SoftmaxCrossEntropyHead | LayerSpec::MeanSquaredHead,
                    LayerCache::Head,
                ) => {}
                _ => return Err(NetError::NoForwardCache),
            }
        }
        grads_rev.reverse();
        self.last_grads = grads_rev;
        Ok(g)
    }
}

impl Tensor {
    /// Gradient mask for relu: passes `self` where `reference > 0`.
    fn zip_mask(&self, reference: &Tensor) -> Result<Tensor, crate::tensor::TensorError> {
        let mask = reference.map(|v| if v > 0.0 { 1.0 } else { 0.0 })?;
        self.mul(&mask)
    }
}

/// Splits a topology into contiguous segments at the given cut indices. A cut
/// at `n` puts layers `0..=n` in the first segment, matching the convention
/// that the client holds layers up to and including the cut layer. Cuts must
/// be strictly increasing and lie strictly between 0 and the last layer
/// index.
pub fn split(topology: &NetworkTopology, cuts: &[usize]) -> Result<Vec<SegmentNet>, NetError> {
    let last = topology.last_index();
    let valid = !cuts.is_empty()
        && cuts.windows(2).all(|w| w[0] < w[1])
        && cuts.iter().all(|&c| c > 0 && c < last);
    if !valid {
        return Err(NetError::InvalidCut {
            cuts: cuts.to_vec(),
            last,
        });
    }
    let mut segments = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0usize;
    for &c in cuts {
        segments.push(SegmentNet::from_layers(
            topology.layers()[start..=c].to_vec(),
        ));
        start = c + 1;
    }
    segments.push(SegmentNet::from_layers(topology.layers()[start..].to_vec()));
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{initialize, Initializer};
    use crate::nn::layer::LossKind;
    use crate::nn::loss::loss_and_gradient;
    use crate::tensor::Tensor;

    fn seeded_net(seed: u64) -> NetworkTopology {
        let topo = NetworkTopology::chain(vec![
            LayerSpec::fully_connected(4, 6, true).unwrap(),
            LayerSpec::Relu,
            LayerSpec::fully_connected(6, 5, true).unwrap(),
            LayerSpec::Sigmoid,
            LayerSpec::fully_connected(5, 3, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
        ])
        .unwrap();
        initialize(&topo, Initializer::xavier(seed))
    }

    fn batch(seed: u64, rows: usize, cols: usize) -> Tensor {
        // Cheap deterministic pseudo-data.
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| {
                let x = (i as u64)
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(seed);
                ((x >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn empty_segment_is_identity() {
        let mut seg = SegmentNet::from_layers(vec![]);
        let x = batch(1, 3, 4);
        let y = seg.forward(&x).unwrap();
        assert!(y.bitwise_eq(&x));
        let g = seg.backward(&x, 0.1).unwrap();
        assert!(g.bitwise_eq(&x));
    }

    #[test]
    fn relu_layer_definition() {
        let mut seg = SegmentNet::from_layers(vec![LayerSpec::Relu]);
        let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        let y = seg.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn split_composition_equals_whole_forward() {
        let net = seeded_net(21);
        let x = batch(2, 7, 4);
        let mut whole = SegmentNet::whole(&net);
        let want = whole.forward(&x).unwrap();
        for cut in 1..net.last_index() {
            let mut parts = split(&net, &[cut]).unwrap();
            let mid = parts[0].forward(&x).unwrap();
            let got = parts[1].forward(&mid).unwrap();
            assert!(got.bitwise_eq(&want), "cut {cut} diverged");
        }
    }

    #[test]
    fn split_partition_lengths() {
        let net = seeded_net(3);
        let parts = split(&net, &[2]).unwrap();
        assert_eq!(parts[0].layers().len(), 3);
        assert_eq!(parts[1].layers().len(), 3);
        let parts = split(&net, &[1, 3]).unwrap();
        assert_eq!(
            parts.iter().map(|p| p.layers().len()).sum::<usize>(),
            net.layers().len()
        );
        assert!(split(&net, &[0]).is_err());
        assert!(split(&net, &[5]).is_err());
        assert!(split(&net, &[3, 2]).is_err());
    }

    #[test]
    fn split_backward_composition_matches_monolithic() {
        let x = batch(5, 6, 4);
        let target = one_hot_target(6, 3);
        let lr = 0.05;

        let net = seeded_net(77);
        let mut whole = SegmentNet::whole(&net);
        let out = whole.forward(&x).unwrap();
        let (_, g) = loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, &target).unwrap();
        whole.backward(&g, lr).unwrap();

        for cut in 1..net.last_index() {
            let mut parts = split(&net, &[cut]).unwrap();
            let mid = parts[0].forward(&x).unwrap();
            let out2 = parts[1].forward(&mid).unwrap();
            let (_, g2) =
                loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out2, &target).unwrap();
            let g_cut = parts[1].backward(&g2, lr).unwrap();
            parts[0].backward(&g_cut, lr).unwrap();

            let mut rebuilt = parts[0].layers().to_vec();
            rebuilt.extend_from_slice(parts[1].layers());
            assert_eq!(
                crate::nn::weights::weight_digest(&rebuilt),
                whole.weight_digest(),
                "cut {cut} diverged after backward"
            );
        }
    }

    fn one_hot_target(rows: usize, classes: usize) -> Tensor {
        let mut data = vec![0.0; rows * classes];
        for i in 0..rows {
            data[i * classes + (i % classes)] = 1.0;
        }
        Tensor::new(vec![rows, classes], data).unwrap()
    }

    #[test]
    fn backward_without_forward_errors() {
        let net = seeded_net(2);
        let mut seg = SegmentNet::whole(&net);
        let g = batch(0, 2, 3);
        assert!(matches!(seg.backward(&g, 0.1), Err(NetError::NoForwardCache)));
    }

    #[test]
    fn zero_upstream_gradient_changes_nothing() {
        let net = seeded_net(13);
        let mut seg = SegmentNet::whole(&net);
        let before = seg.weight_digest();
        let x = batch(4, 3, 4);
        let out = seg.forward(&x).unwrap();
        let zero = Tensor::zeros(out.shape().to_vec()).unwrap();
        let gin = seg.backward(&zero, 0.5).unwrap();
        assert_eq!(seg.weight_digest(), before);
        assert!(gin.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Central differences over 20 sampled parameters of a 2-layer net.
        let topo = NetworkTopology::chain(vec![
            LayerSpec::fully_connected(3, 5, true).unwrap(),
            LayerSpec::Sigmoid,
            LayerSpec::fully_connected(5, 2, true).unwrap(),
            LayerSpec::MeanSquaredHead,
        ])
        .unwrap();
        let net = initialize(&topo, Initializer::xavier(31));
        let x = batch(9, 4, 3);
        let target = batch(10, 4, 2);

        let mut seg = SegmentNet::whole(&net);
        let out = seg.forward(&x).unwrap();
        let (_, g) = loss_and_gradient(LossKind::MeanSquared, &out, &target).unwrap();
        seg.backward(&g, 0.0).unwrap();
        let analytic = seg.last_grads().to_vec();

        let loss_at = |layers: Vec<LayerSpec>| -> f64 {
            let mut s = SegmentNet::from_layers(layers);
            let out = s.forward(&x).unwrap();
            loss_and_gradient(LossKind::MeanSquared, &out, &target)
                .unwrap()
                .0
        };

        let h = 1e-5;
        let mut checked = 0;
        for lg in &analytic {
            let n_params = lg.weight.len();
            for k in (0..n_params).step_by((n_params / 8).max(1)) {
                let perturb = |delta: f64| -> f64 {
                    let mut layers = seg.layers().to_vec();
                    if let LayerSpec::FullyConnected { weight, .. } = &mut layers[lg.layer_index] {
                        let mut data = weight.data().to_vec();
                        data[k] += delta;
                        *weight = Tensor::new(weight.shape().to_vec(), data).unwrap();
                    }
                    loss_at(layers)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let a = lg.weight.data()[k];
                let denom = a.abs().max(1e-8);
                assert!(
                    ((fd - a) / denom).abs() < 1e-6,
                    "layer {} param {k}: fd {fd} vs analytic {a}",
                    lg.layer_index
                );
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} parameters checked");
    }

    #[test]
    fn weight_digest_changes_after_sgd_step() {
        let net = seeded_net(41);
        let mut seg = SegmentNet::whole(&net);
        let before = seg.weight_digest();
        let x = batch(6, 5, 4);
        let target = one_hot_target(5, 3);
        let out = seg.forward(&x).unwrap();
        let (_, g) = loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, &target).unwrap();
        seg.backward(&g, 0.1).unwrap();
        assert_ne!(seg.weight_digest(), before);
    }
}
