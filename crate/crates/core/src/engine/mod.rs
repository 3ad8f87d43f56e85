//! Orchestration of the split-training steps: the two-agent step, the
//! multi-agent round-robin session with weight refresh, semi-supervised
//! gradient mixing, and the label-free wraparound variant.
//!
//! Everything here is pure, transport-agnostic state manipulation; the same
//! logic is driven message-by-message by the transport layer.

pub mod delta;
pub mod permute;

pub use delta::{apply_delta, compute_delta, WeightDelta};
pub use permute::permuted_equivalent;

use thiserror::Error;

use crate::nn::{loss_and_gradient, Batch, LayerSpec, NetError, SegmentNet};
use crate::nn::weights;
use crate::tensor::{Tensor, TensorChecksum, TensorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("batch carries no labels")]
    MissingLabels,
    #[error("server segment has no loss head")]
    NoLossHead,
    #[error("client state is not configured for this training mode")]
    WrongMode,
    #[error("unknown client {0}")]
    UnknownClient(String),
    #[error("refresh source {0} unavailable")]
    RefreshSourceUnavailable(String),
    #[error("weight checksum mismatch after refresh: expected {expected}, got {got}")]
    ChecksumMismatch { expected: String, got: String },
    #[error("weight delta does not match parameter shapes at index {0}")]
    DeltaShapeMismatch(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The client-side segment arrangement for each training mode.
#[derive(Debug, Clone)]
pub enum AliceSegments {
    /// Algorithms 1 and 2: the head of the network up to the cut.
    Head(SegmentNet),
    /// Semi-supervised: encoder up to the inner cut, decoder reconstructing
    /// the input from the encoder output.
    Autoencoder {
        encoder: SegmentNet,
        decoder: SegmentNet,
    },
    /// Wraparound: the network head plus the tail segment holding the loss
    /// head, so labels never leave the client.
    Wraparound { head: SegmentNet, tail: SegmentNet },
}

/// Client-side training state: segments, a snapshot of the parameters taken
/// at session start (the base for weight deltas), and the gradient-mixing
/// weight for the semi-supervised mode.
#[derive(Debug, Clone)]
pub struct AliceState {
    client_id: String,
    segments: AliceSegments,
    initial_params: Vec<Tensor>,
    alpha: f64,
}

impl AliceState {
    pub fn new_head(client_id: impl Into<String>, segment: SegmentNet) -> Self {
        let mut s = AliceState {
            client_id: client_id.into(),
            segments: AliceSegments::Head(segment),
            initial_params: Vec::new(),
            alpha: 0.0,
        };
        s.reset_initial();
        s
    }

    pub fn new_autoencoder(
        client_id: impl Into<String>,
        encoder: SegmentNet,
        decoder: SegmentNet,
        alpha: f64,
    ) -> Self {
        let mut s = AliceState {
            client_id: client_id.into(),
            segments: AliceSegments::Autoencoder { encoder, decoder },
            initial_params: Vec::new(),
            alpha,
        };
        s.reset_initial();
        s
    }

    pub fn new_wraparound(
        client_id: impl Into<String>,
        head: SegmentNet,
        tail: SegmentNet,
    ) -> Self {
        let mut s = AliceState {
            client_id: client_id.into(),
            segments: AliceSegments::Wraparound { head, tail },
            initial_params: Vec::new(),
            alpha: 0.0,
        };
        s.reset_initial();
        s
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn segments(&self) -> &AliceSegments {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut AliceSegments {
        &mut self.segments
    }

    fn segment_list(&self) -> Vec<&SegmentNet> {
        match &self.segments {
            AliceSegments::Head(s) => vec![s],
            AliceSegments::Autoencoder { encoder, decoder } => vec![encoder, decoder],
            AliceSegments::Wraparound { head, tail } => vec![head, tail],
        }
    }

    fn segment_list_mut(&mut self) -> Vec<&mut SegmentNet> {
        match &mut self.segments {
            AliceSegments::Head(s) => vec![s],
            AliceSegments::Autoencoder { encoder, decoder } => vec![encoder, decoder],
            AliceSegments::Wraparound { head, tail } => vec![head, tail],
        }
    }

    /// All client-side layers in order, across segments.
    pub fn all_layers(&self) -> Vec<LayerSpec> {
        self.segment_list()
            .iter()
            .flat_map(|s| s.layers().iter().cloned())
            .collect()
    }

    /// Current parameter tensors in layer order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.segment_list()
            .iter()
            .flat_map(|s| s.parameters())
            .collect()
    }

    /// Parameters captured at session start.
    pub fn initial_params(&self) -> &[Tensor] {
        &self.initial_params
    }

    /// Re-snapshots the current parameters as the delta base for the next
    /// session.
    pub fn reset_initial(&mut self) {
        self.initial_params = self.parameters();
    }

    /// Weight file over all client-side layers.
    pub fn weight_bytes(&self) -> Vec<u8> {
        weights::weight_bytes(&self.all_layers())
    }

    pub fn weight_digest(&self) -> TensorChecksum {
        weights::weight_digest(&self.all_layers())
    }

    /// Loads a weight file produced by [`AliceState::weight_bytes`] on a
    /// structurally identical client.
    pub fn load_weight_bytes(&mut self, bytes: &[u8]) -> Result<(), EngineError> {
        let mut combined = self.all_layers();
        weights::apply_weight_bytes(&mut combined, bytes)?;
        let mut iter = combined.into_iter();
        for seg in self.segment_list_mut() {
            let n = seg.layers().len();
            let replacement: Vec<LayerSpec> = iter.by_ref().take(n).collect();
            for (dst, src) in seg.layers_mut().iter_mut().zip(replacement) {
                *dst = src;
            }
        }
        Ok(())
    }

    /// Copies parameters from a structurally identical client.
    pub fn copy_params_from(&mut self, other: &AliceState) -> Result<(), EngineError> {
        let src = other.segment_list();
        let mut dst = self.segment_list_mut();
        if src.len() != dst.len() {
            return Err(EngineError::WrongMode);
        }
        for (d, s) in dst.iter_mut().zip(src) {
            d.copy_params_from(s)?;
        }
        Ok(())
    }

    /// Replaces current parameters wholesale (delta refresh path).
    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<(), EngineError> {
        let mut idx = 0;
        for seg in self.segment_list_mut() {
            for layer in seg.layers_mut() {
                if let LayerSpec::FullyConnected { weight, bias } = layer {
                    let w = params
                        .get(idx)
                        .ok_or(EngineError::DeltaShapeMismatch(idx))?;
                    if w.shape() != weight.shape() {
                        return Err(EngineError::DeltaShapeMismatch(idx));
                    }
                    *weight = w.clone();
                    idx += 1;
                    if let Some(b) = bias {
                        let nb = params
                            .get(idx)
                            .ok_or(EngineError::DeltaShapeMismatch(idx))?;
                        if nb.shape() != b.shape() {
                            return Err(EngineError::DeltaShapeMismatch(idx));
                        }
                        *b = nb.clone();
                        idx += 1;
                    }
                }
            }
        }
        if idx != params.len() {
            return Err(EngineError::DeltaShapeMismatch(idx));
        }
        Ok(())
    }
}

/// Server-side state: the tail segment, the identity of the last client that
/// completed a step, and the digest of the client-side weights that step
/// produced.
#[derive(Debug, Clone)]
pub struct BobState {
    segment: SegmentNet,
    last_trained: Option<String>,
    expected_checksum: TensorChecksum,
}

impl BobState {
    pub fn new(segment: SegmentNet, expected_checksum: TensorChecksum) -> Self {
        BobState {
            segment,
            last_trained: None,
            expected_checksum,
        }
    }

    pub fn segment(&self) -> &SegmentNet {
        &self.segment
    }

    pub fn segment_mut(&mut self) -> &mut SegmentNet {
        &mut self.segment
    }

    pub fn last_trained(&self) -> Option<&str> {
        self.last_trained.as_deref()
    }

    pub fn expected_checksum(&self) -> TensorChecksum {
        self.expected_checksum
    }

    pub fn set_expected_checksum(&mut self, c: TensorChecksum) {
        self.expected_checksum = c;
    }

    fn record_step(&mut self, alice: &AliceState) {
        self.last_trained = Some(alice.client_id.clone());
        self.expected_checksum = alice.weight_digest();
    }
}

/// One step of the two-agent algorithm: forward to the cut on the client,
/// finish the forward and compute the loss on the server, backpropagate the
/// server segment, return the cut gradient, backpropagate the client segment.
/// Bitwise-identical to one monolithic SGD step on the unsplit topology.
pub fn two_agent_step(
    alice: &mut AliceState,
    bob: &mut BobState,
    batch: &Batch,
    lr: f64,
) -> Result<f64, EngineError> {
    let label = batch.label().ok_or(EngineError::MissingLabels)?.clone();
    let seg = match &mut alice.segments {
        AliceSegments::Head(s) => s,
        _ => return Err(EngineError::WrongMode),
    };
    let kind = bob.segment.loss_kind().ok_or(EngineError::NoLossHead)?;

    let cut_activation = seg.forward(batch.data())?;
    let output = bob.segment.forward(&cut_activation)?;
    let (loss, gradient) = loss_and_gradient(kind, &output, &label)?;
    let cut_gradient = bob.segment.backward(&gradient, lr)?;
    seg.backward(&cut_gradient, lr)?;

    bob.record_step(alice);
    Ok(loss)
}

/// How a scheduled client obtains the last-trained client's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshMode {
    /// Copy the full parameter set (the base semantics).
    FullWeights,
    /// Apply the source's cumulative weight delta onto the shared initial
    /// weights (the online-learning optimization).
    Deltas,
}

/// Runs a schedule of `(client_id, batch)` entries against one server. Each
/// entry whose client is not the last-trained client first refreshes its
/// weights from the last-trained client, then executes a two-agent step.
pub fn multi_agent_session(
    alices: &mut [AliceState],
    bob: &mut BobState,
    schedule: &[(String, Batch)],
    lr: f64,
    refresh: RefreshMode,
) -> Result<Vec<f64>, EngineError> {
    let mut losses = Vec::with_capacity(schedule.len());
    for (client_id, batch) in schedule {
        let idx = alices
            .iter()
            .position(|a| a.client_id() == client_id)
            .ok_or_else(|| EngineError::UnknownClient(client_id.clone()))?;

        if let Some(last) = bob.last_trained.clone() {
            if last != *client_id {
                let src_idx = alices
                    .iter()
                    .position(|a| a.client_id() == last)
                    .ok_or_else(|| EngineError::RefreshSourceUnavailable(last.clone()))?;
                match refresh {
                    RefreshMode::FullWeights => {
                        let src = alices[src_idx].clone();
                        alices[idx].copy_params_from(&src)?;
                    }
                    RefreshMode::Deltas => {
                        let d = compute_delta(&alices[src_idx]);
                        let base = alices[idx].initial_params().to_vec();
                        let params = apply_delta(&base, &[d])?;
                        alices[idx].set_parameters(&params)?;
                    }
                }
            }
        }
        let got = alices[idx].weight_digest();
        if got != bob.expected_checksum {
            return Err(EngineError::ChecksumMismatch {
                expected: bob.expected_checksum.to_hex(),
                got: got.to_hex(),
            });
        }
        losses.push(two_agent_step(&mut alices[idx], bob, batch, lr)?);
    }
    Ok(losses)
}

/// One semi-supervised step. The encoder output goes to the server for the
/// supervised loss and to the local decoder for the reconstruction loss; the
/// encoder receives `supervised_gradient + alpha * reconstruction_gradient`
/// at the cut. Decoder parameters update from the reconstruction branch only.
pub fn semi_supervised_step(
    alice: &mut AliceState,
    bob: &mut BobState,
    batch: &Batch,
    lr: f64,
) -> Result<(f64, f64), EngineError> {
    let label = batch.label().ok_or(EngineError::MissingLabels)?.clone();
    let alpha = alice.alpha;
    let (encoder, decoder) = match &mut alice.segments {
        AliceSegments::Autoencoder { encoder, decoder } => (encoder, decoder),
        _ => return Err(EngineError::WrongMode),
    };
    let kind = bob.segment.loss_kind().ok_or(EngineError::NoLossHead)?;

    let encoded = encoder.forward(batch.data())?;
    let reconstructed = decoder.forward(&encoded)?;
    if reconstructed.cols() != batch.data().cols() {
        return Err(EngineError::Net(NetError::InputDimMismatch {
            expected: batch.data().cols(),
            got: reconstructed.cols(),
        }));
    }

    let output = bob.segment.forward(&encoded)?;
    let (supervised_loss, gradient) = loss_and_gradient(kind, &output, &label)?;
    let supervised_cut = bob.segment.backward(&gradient, lr)?;

    let (reconstruction_loss, rec_gradient) = loss_and_gradient(
        crate::nn::LossKind::MeanSquared,
        &reconstructed,
        batch.data(),
    )?;
    let reconstruction_cut = decoder.backward(&rec_gradient, lr)?;

    let combined = supervised_cut.add(&reconstruction_cut.scale(alpha)?)?;
    encoder.backward(&combined, lr)?;

    bob.record_step(alice);
    Ok((supervised_loss, reconstruction_loss))
}

/// One wraparound step: forward client -> server -> client, loss computed on
/// the client tail, gradients flow back client -> server -> client. No label
/// is ever an input to the server side.
pub fn wraparound_step(
    alice: &mut AliceState,
    bob: &mut BobState,
    batch: &Batch,
    lr: f64,
) -> Result<f64, EngineError> {
    let label = batch.label().ok_or(EngineError::MissingLabels)?.clone();
    let (head, tail) = match &mut alice.segments {
        AliceSegments::Wraparound { head, tail } => (head, tail),
        _ => return Err(EngineError::WrongMode),
    };
    let kind = tail.loss_kind().ok_or(EngineError::NoLossHead)?;

    let first = head.forward(batch.data())?;
    let middle = bob.segment.forward(&first)?;
    let output = tail.forward(&middle)?;
    let (loss, gradient) = loss_and_gradient(kind, &output, &label)?;
    let tail_cut = tail.backward(&gradient, lr)?;
    let head_cut = bob.segment.backward(&tail_cut, lr)?;
    head.backward(&head_cut, lr)?;

    bob.record_step(alice);
    Ok(loss)
}


#[cfg(test)]
mod semi_supervised_tests {
    use super::*;
    use crate::nn::{
        initialize, split, Initializer, LayerSpec, NetworkTopology, SegmentNet,
    };
    use crate::tensor::Tensor;

    fn autoencoder_net(seed: u64) -> NetworkTopology {
        let layers = vec![
            LayerSpec::fully_connected(6, 4, true).unwrap(),
            LayerSpec::Relu,
            LayerSpec::fully_connected(4, 6, true).unwrap(),
            LayerSpec::Sigmoid,
            LayerSpec::fully_connected(4, 3, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
        ];
        let topo = NetworkTopology::branched_autoencoder(layers, 1, 3).unwrap();
        initialize(&topo, Initializer::xavier(seed))
    }

    #[test]
    fn alpha_zero_encoder_update_equals_plain_split_step() {
        let net = autoencoder_net(23);
        let batch = crate::engine::tests::labeled_batch(4, 5, 6, 3);
        let lr = 0.1;

        // Semi-supervised step with alpha = 0.
        let mut parts = split(&net, &[1, 3]).unwrap().into_iter();
        let encoder = parts.next().unwrap();
        let decoder = parts.next().unwrap();
        let tail = parts.next().unwrap();
        let mut alice = AliceState::new_autoencoder("a", encoder.clone(), decoder, 0.0);
        let mut bob = BobState::new(tail.clone(), alice.weight_digest());
        semi_supervised_step(&mut alice, &mut bob, &batch, lr).unwrap();

        // Plain two-agent step over encoder + classifier tail only.
        let mut alice2 = AliceState::new_head("a", encoder);
        let mut bob2 = BobState::new(tail, alice2.weight_digest());
        two_agent_step(&mut alice2, &mut bob2, &batch, lr).unwrap();

        let enc_after = match alice.segments() {
            AliceSegments::Autoencoder { encoder, .. } => encoder.parameters(),
            _ => unreachable!(),
        };
        let head_after = match alice2.segments() {
            AliceSegments::Head(s) => s.parameters(),
            _ => unreachable!(),
        };
        assert_eq!(enc_after.len(), head_after.len());
        for (a, b) in enc_after.iter().zip(&head_after) {
            assert!(a.bitwise_eq(b), "encoder diverged from plain split step");
        }
        // Classifier segments agree too.
        for (a, b) in bob.segment().parameters().iter().zip(&bob2.segment().parameters()) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn perfect_reconstruction_makes_combined_gradient_supervised_only() {
        // Identity encoder/decoder on a linear task: reconstruction is exact,
        // so its gradient vanishes and the combined encoder gradient reduces
        // to the supervised one for any alpha.
        let dim = 4;
        let eye = |n: usize| {
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                data[i * n + i] = 1.0;
            }
            Tensor::new(vec![n, n], data).unwrap()
        };
        let encoder = SegmentNet::from_layers(vec![LayerSpec::FullyConnected {
            weight: eye(dim),
            bias: Some(Tensor::zeros(vec![dim]).unwrap()),
        }]);
        let decoder = SegmentNet::from_layers(vec![LayerSpec::FullyConnected {
            weight: eye(dim),
            bias: Some(Tensor::zeros(vec![dim]).unwrap()),
        }]);
        let classifier_topology = NetworkTopology::chain(vec![
            LayerSpec::fully_connected(dim, 3, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
        ])
        .unwrap();
        let tail = SegmentNet::whole(&initialize(
            &classifier_topology,
            Initializer::xavier(77),
        ));
        let batch = crate::engine::tests::labeled_batch(9, 5, dim, 3);

        let run = |alpha: f64| -> Vec<Tensor> {
            let mut alice =
                AliceState::new_autoencoder("a", encoder.clone(), decoder.clone(), alpha);
            let mut bob = BobState::new(tail.clone(), alice.weight_digest());
            semi_supervised_step(&mut alice, &mut bob, &batch, 0.0).unwrap();
            match alice.segments() {
                AliceSegments::Autoencoder { encoder, .. } => encoder
                    .last_grads()
                    .iter()
                    .map(|g| g.weight.clone())
                    .collect(),
                _ => unreachable!(),
            }
        };

        let supervised_only = run(0.0);
        let with_reconstruction = run(5.0);
        for (a, b) in supervised_only.iter().zip(&with_reconstruction) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(
                    (x - y).abs() < 1e-12,
                    "reconstruction branch contributed {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn decoder_dimension_mismatch_is_rejected() {
        // Decoder reconstructing the wrong width must error at step time.
        let encoder = SegmentNet::from_layers(vec![
            LayerSpec::fully_connected(6, 4, true).unwrap(),
        ]);
        let bad_decoder = SegmentNet::from_layers(vec![
            LayerSpec::fully_connected(4, 5, true).unwrap(),
        ]);
        let tail_topology = NetworkTopology::chain(vec![
            LayerSpec::fully_connected(4, 3, true).unwrap(),
            LayerSpec::SoftmaxCrossEntropyHead,
        ])
        .unwrap();
        let tail = SegmentNet::whole(&initialize(&tail_topology, Initializer::xavier(3)));
        let batch = crate::engine::tests::labeled_batch(2, 4, 6, 3);
        let mut alice = AliceState::new_autoencoder("a", encoder, bad_decoder, 0.1);
        let mut bob = BobState::new(tail, alice.weight_digest());
        assert!(semi_supervised_step(&mut alice, &mut bob, &batch, 0.1).is_err());
    }
}
