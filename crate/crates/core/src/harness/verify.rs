//! Verification helpers shared by the CLI `verify` command and the
//! acceptance suite: gradient checks against central finite differences and
//! the quick equivalence/property checks.

use crate::data::synth::synth_dataset;
use crate::engine::{
    multi_agent_session, semi_supervised_step, two_agent_step, AliceSegments, AliceState,
    BobState, RefreshMode,
};
use crate::nn::{
    initialize, loss_and_gradient, split, Batch, Initializer, LayerSpec, LossKind,
    NetworkTopology, SegmentNet,
};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        }
    }
}

/// A small branched autoencoder topology for gradient checks:
/// data dim 8, encoder out 5, classifier over 4 classes.
pub fn autoencoder_test_topology(seed: u64) -> NetworkTopology {
    let layers = vec![
        LayerSpec::fully_connected(8, 5, true).unwrap(),
        LayerSpec::Relu,
        LayerSpec::fully_connected(5, 8, true).unwrap(),
        LayerSpec::Sigmoid,
        LayerSpec::fully_connected(5, 4, true).unwrap(),
        LayerSpec::SoftmaxCrossEntropyHead,
    ];
    let topo = NetworkTopology::branched_autoencoder(layers, 1, 3).unwrap();
    initialize(&topo, Initializer::xavier(seed))
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Verifies that the combined encoder gradient of one semi-supervised step
/// equals central finite differences of
/// `supervised_loss + alpha * reconstruction_loss` with respect to encoder
/// parameters. Samples about `target_samples` weights; `h` is the
/// perturbation.
pub fn semi_supervised_gradient_check(
    seed: u64,
    alpha: f64,
    target_samples: usize,
    h: f64,
) -> FdReport {
    let net = autoencoder_test_topology(seed);
    let mut parts = split(&net, &[1, 3]).unwrap().into_iter();
    let encoder = parts.next().unwrap();
    let decoder = parts.next().unwrap();
    let bob_segment = parts.next().unwrap();

    let data = synth_dataset(4, 8, 6, seed ^ 99);
    let batch = data.batches(6).remove(0);

    let mut alice = AliceState::new_autoencoder("a", encoder, decoder, alpha);
    let mut bob = BobState::new(bob_segment.clone(), alice.weight_digest());
    // lr = 0 keeps every parameter at its initial value while the backward
    // pass records analytic gradients.
    semi_supervised_step(&mut alice, &mut bob, &batch, 0.0).unwrap();

    let (analytic, encoder, decoder) = match alice.segments() {
        AliceSegments::Autoencoder { encoder, decoder } => (
            encoder.last_grads().to_vec(),
            encoder.clone(),
            decoder.clone(),
        ),
        _ => unreachable!(),
    };

    // Combined objective as a function of encoder layers, everything else
    // frozen at the initial parameters.
    let objective = |enc_layers: Vec<LayerSpec>| -> f64 {
        let mut enc = SegmentNet::from_layers(enc_layers);
        let mut dec = decoder.clone();
        let mut head = bob_segment.clone();
        let encoded = enc.forward(batch.data()).unwrap();
        let reconstructed = dec.forward(&encoded).unwrap();
        let output = head.forward(&encoded).unwrap();
        let (sup, _) = loss_and_gradient(
            LossKind::SoftmaxCrossEntropy,
            &output,
            batch.label().unwrap(),
        )
        .unwrap();
        let (rec, _) =
            loss_and_gradient(LossKind::MeanSquared, &reconstructed, batch.data()).unwrap();
        sup + alpha * rec
    };

    let total_params: usize = analytic.iter().map(|g| g.weight.len()).sum();
    let stride = (total_params / target_samples).max(1);
    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    for lg in &analytic {
        for k in (0..lg.weight.len()).step_by(stride) {
            let perturb = |delta: f64| -> f64 {
                let mut layers = encoder.layers().to_vec();
                if let LayerSpec::FullyConnected { weight, .. } = &mut layers[lg.layer_index] {
                    let mut data = weight.data().to_vec();
                    data[k] += delta;
                    *weight = Tensor::new(weight.shape().to_vec(), data).unwrap();
                }
                objective(layers)
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            let a = lg.weight.data()[k];
            let rel = (fd - a).abs() / a.abs().max(1e-8);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    FdReport {
        checked,
        max_rel_err,
    }
}

fn quick_topology(seed: u64) -> NetworkTopology {
    let topo = NetworkTopology::chain(vec![
        LayerSpec::fully_connected(6, 10, true).unwrap(),
        LayerSpec::Relu,
        LayerSpec::fully_connected(10, 7, true).unwrap(),
        LayerSpec::Relu,
        LayerSpec::fully_connected(7, 3, true).unwrap(),
        LayerSpec::SoftmaxCrossEntropyHead,
    ])
    .unwrap();
    initialize(&topo, Initializer::xavier(seed))
}

fn combined_digest(alice: &AliceState, bob: &BobState) -> String {
    let mut layers = alice.all_layers();
    layers.extend_from_slice(bob.segment().layers());
    crate::nn::weights::weight_digest(&layers).to_hex()
}

fn check_two_agent_equivalence(steps: usize) -> CheckOutcome {
    let net = quick_topology(1);
    let batches: Vec<Batch> = synth_dataset(3, 6, steps * 4, 5).batches(4);
    let mut whole = SegmentNet::whole(&net);
    let mut parts = split(&net, &[1]).unwrap().into_iter();
    let mut alice = AliceState::new_head("a", parts.next().unwrap());
    let mut bob = BobState::new(parts.next().unwrap(), alice.weight_digest());
    for b in &batches {
        let out = whole.forward(b.data()).unwrap();
        let (_, g) =
            loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, b.label().unwrap()).unwrap();
        whole.backward(&g, 0.1).unwrap();
        two_agent_step(&mut alice, &mut bob, b, 0.1).unwrap();
    }
    let pass = combined_digest(&alice, &bob) == whole.weight_digest().to_hex();
    CheckOutcome::new(
        "two-agent split equals monolithic training (bitwise)",
        pass,
        format!("{steps} steps"),
    )
}

fn check_multi_agent_equivalence(agents: usize, steps: usize) -> CheckOutcome {
    let net = quick_topology(2);
    let batches: Vec<Batch> = synth_dataset(3, 6, steps * 4, 6).batches(4);
    let mut whole = SegmentNet::whole(&net);
    let mut parts = split(&net, &[1]).unwrap().into_iter();
    let head = parts.next().unwrap();
    let tail = parts.next().unwrap();
    let mut alices: Vec<AliceState> = (0..agents)
        .map(|i| AliceState::new_head(format!("alice{i}"), head.clone()))
        .collect();
    let mut bob = BobState::new(tail, alices[0].weight_digest());
    let schedule: Vec<(String, Batch)> = batches
        .iter()
        .enumerate()
        .map(|(i, b)| (format!("alice{}", i % agents), b.clone()))
        .collect();
    for (_, b) in &schedule {
        let out = whole.forward(b.data()).unwrap();
        let (_, g) =
            loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, b.label().unwrap()).unwrap();
        whole.backward(&g, 0.1).unwrap();
    }
    multi_agent_session(&mut alices, &mut bob, &schedule, 0.1, RefreshMode::FullWeights).unwrap();
    let last = bob.last_trained().unwrap().to_string();
    let alice = alices.iter().find(|a| a.client_id() == last).unwrap();
    let pass = combined_digest(alice, &bob) == whole.weight_digest().to_hex();
    CheckOutcome::new(
        "round-robin multi-agent equals monolithic training (bitwise)",
        pass,
        format!("{agents} agents, {steps} steps"),
    )
}

fn check_gradient_mixing() -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut total = 0usize;
    for alpha in [0.0, 0.5, 1.0] {
        let r = semi_supervised_gradient_check(3, alpha, 8, 1e-5);
        worst = worst.max(r.max_rel_err);
        total += r.checked;
    }
    CheckOutcome::new(
        "semi-supervised combined gradient matches finite differences",
        worst < 1e-6,
        format!("{total} parameters, max rel err {worst:.2e}"),
    )
}

fn check_permutation_equivalence() -> CheckOutcome {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let net = quick_topology(4);
    let seg = SegmentNet::whole(&net);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
    let inputs = synth_dataset(3, 6, 40, 8);
    let mut worst = 0.0f64;
    let mut pass = true;
    for (li, layer) in seg.layers().iter().enumerate() {
        let out_dim = match layer {
            LayerSpec::FullyConnected { weight, .. } => weight.shape()[1],
            _ => continue,
        };
        if li == seg.layers().len() - 2 {
            // Final parameterized layer has no downstream layer to absorb
            // the inverse permutation.
            continue;
        }
        let mut perm: Vec<usize> = (0..out_dim).collect();
        perm.shuffle(&mut rng);
        let permuted = match crate::engine::permuted_equivalent(&seg, li, &perm) {
            Ok(p) => p,
            Err(_) => {
                pass = false;
                continue;
            }
        };
        for batch in inputs.batches(20) {
            let y0 = seg.clone().forward(batch.data()).unwrap();
            let y1 = permuted.clone().forward(batch.data()).unwrap();
            for (a, b) in y0.data().iter().zip(y1.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        if permuted.weight_digest() == seg.weight_digest()
            && perm.iter().enumerate().any(|(i, &p)| i != p)
        {
            pass = false;
        }
    }
    CheckOutcome::new(
        "output permutations are functionally equivalent configurations",
        pass && worst <= 1e-12,
        format!("max abs diff {worst:.2e}"),
    )
}

fn check_protocol_round_trip(cases: usize) -> CheckOutcome {
    use crate::protocol::{decode_frame, Message, MAX_FRAME_LEN};
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
    let mut pass = true;
    for i in 0..cases {
        let msg = match i % 6 {
            0 => Message::TrainingRequest {
                checksum: format!("{:064x}", rng.gen::<u128>()),
                n_iter: rng.gen_range(0..1000),
                client_id: format!("alice{}", rng.gen_range(0..50)),
            },
            1 => Message::TrainingAllowed {
                token: format!("{:032x}", rng.gen::<u128>()),
            },
            2 => Message::RefreshRequired {
                client: format!("alice{}", rng.gen_range(0..50)),
                address: "10.0.0.1:9000".into(),
            },
            3 => {
                let n = rng.gen_range(1..20usize);
                let t = Tensor::new(
                    vec![n, 3],
                    (0..n * 3).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                )
                .unwrap();
                crate::protocol::tensor_message(
                    crate::protocol::LabelPolicy::Allowed,
                    &t,
                    None,
                    crate::protocol::TensorMode::Training,
                )
                .unwrap()
            }
            4 => Message::WeightUpload {
                checksum: format!("{:064x}", rng.gen::<u128>()),
                weights: (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect(),
                client_id: "alice1".into(),
            },
            _ => Message::Snapshot {
                checksum: format!("{:064x}", rng.gen::<u128>()),
                client_id: "alice2".into(),
            },
        };
        if decode_frame(&msg.to_frame(), MAX_FRAME_LEN).ok() != Some(msg) {
            pass = false;
            break;
        }
    }
    CheckOutcome::new(
        "message codec round-trips losslessly",
        pass,
        format!("{cases} generated messages"),
    )
}

fn check_decode_fuzz(cases: usize) -> CheckOutcome {
    use crate::protocol::{decode_frame, MAX_FRAME_LEN};
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(29);
    for _ in 0..cases {
        let len = rng.gen_range(0..512usize);
        let mut frame: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        if rng.gen_bool(0.3) && frame.len() >= 4 {
            // Plausible length prefix to reach deeper code paths.
            let payload_len = (frame.len() - 4) as u32;
            frame[0..4].copy_from_slice(&payload_len.to_be_bytes());
        }
        let _ = decode_frame(&frame, MAX_FRAME_LEN);
    }
    CheckOutcome::new(
        "decoder never panics on arbitrary frames",
        true,
        format!("{cases} random frames"),
    )
}

/// The quick verification suite behind the `verify` CLI verb.
pub fn run_quick_suite() -> Vec<CheckOutcome> {
    vec![
        check_two_agent_equivalence(25),
        check_multi_agent_equivalence(3, 24),
        check_gradient_mixing(),
        check_permutation_equivalence(),
        check_protocol_round_trip(1000),
        check_decode_fuzz(1000),
    ]
}
