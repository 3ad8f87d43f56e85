//! End-to-end transport flows: sessions over the deterministic simulator,
//! refresh paths, fault transactionality, and sim/TCP transparency.

use std::sync::Arc;

use splitnn_core::data::synth::synth_dataset;
use splitnn_core::engine::{two_agent_step, AliceState, BobState};
use splitnn_core::nn::{
    initialize, loss_and_gradient, split, Batch, Initializer, LayerSpec, LossKind,
    NetworkTopology, SegmentNet,
};
use splitnn_core::transport::scenario::{CipherChoice, ScenarioSync, BOB_ID};
use splitnn_core::transport::sim::{DisconnectRule, FaultKind, FaultRule};
use splitnn_core::transport::tcp::{run_scenario_tcp, PlainChannel};
use splitnn_core::transport::{deterministic_run, Scenario, TrainingMode};

const DIM: usize = 6;
const CLASSES: usize = 3;

fn topology() -> NetworkTopology {
    NetworkTopology::chain(vec![
        LayerSpec::fully_connected(DIM, 8, true).unwrap(),
        LayerSpec::Relu,
        LayerSpec::fully_connected(8, 5, true).unwrap(),
        LayerSpec::Relu,
        LayerSpec::fully_connected(5, CLASSES, true).unwrap(),
        LayerSpec::SoftmaxCrossEntropyHead,
    ])
    .unwrap()
}

fn batch_stream(n: usize) -> Vec<Batch> {
    synth_dataset(CLASSES, DIM, n * 4, 1234).batches(4)
}

/// Monolithic oracle: same seeded topology, same batch order, plain SGD.
fn monolithic_digest(seed: u64, batches: &[Batch], lr: f64) -> String {
    let net = initialize(&topology(), Initializer::xavier(seed));
    let mut whole = SegmentNet::whole(&net);
    for b in batches {
        let out = whole.forward(b.data()).unwrap();
        let (_, g) =
            loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, b.label().unwrap()).unwrap();
        whole.backward(&g, lr).unwrap();
    }
    whole.weight_digest().to_hex()
}

fn scenario_with_turns(
    seed: u64,
    sync: ScenarioSync,
    turns: Vec<(String, Vec<Batch>)>,
    lr: f64,
) -> Scenario {
    let mut s = Scenario::new(
        seed,
        topology(),
        vec![1],
        TrainingMode::LabelSharing,
        sync,
        lr,
        turns,
    );
    s.cipher = CipherChoice::XorSha;
    s
}

#[test]
fn single_alice_session_matches_engine_oracle() {
    let batches = batch_stream(6);
    let turns = vec![
        ("alice1".to_string(), batches[0..3].to_vec()),
        ("alice1".to_string(), batches[3..6].to_vec()),
    ];
    let scenario = scenario_with_turns(7, ScenarioSync::PeerToPeer, turns, 0.1);
    let out = deterministic_run(&scenario).unwrap();

    assert_eq!(out.combined_digest(), monolithic_digest(7, &batches, 0.1));
    assert_eq!(out.reports[0].completed_turns(), 2);
    assert_eq!(out.last_trained.as_deref(), Some("alice1"));

    // Engine-level oracle for the same flow agrees too.
    let net = initialize(&topology(), Initializer::xavier(7));
    let mut parts = split(&net, &[1]).unwrap().into_iter();
    let mut alice = AliceState::new_head("alice1", parts.next().unwrap());
    let mut bob = BobState::new(parts.next().unwrap(), alice.weight_digest());
    for b in &batches {
        two_agent_step(&mut alice, &mut bob, b, 0.1).unwrap();
    }
    assert_eq!(
        out.alice_digests["alice1"],
        alice.weight_digest().to_hex()
    );
}

#[test]
fn round_robin_refresh_matches_interleaved_oracle() {
    let batches = batch_stream(8);
    let mut turns = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        let id = format!("alice{}", i % 2 + 1);
        turns.push((id, vec![b.clone()]));
    }
    let scenario = scenario_with_turns(21, ScenarioSync::PeerToPeer, turns, 0.05);
    let out = deterministic_run(&scenario).unwrap();

    assert_eq!(out.combined_digest(), monolithic_digest(21, &batches, 0.05));
    // The second client had stale weights at least once and was redirected.
    assert!(out
        .log
        .entries()
        .iter()
        .any(|e| e.kind == "response:refresh"));
    // Refreshes actually fetched from the peer.
    assert!(out
        .log
        .entries()
        .iter()
        .any(|e| e.kind == "weight request" && e.receiver != BOB_ID));
}

#[test]
fn deterministic_run_is_bitwise_reproducible() {
    let batches = batch_stream(4);
    let turns: Vec<(String, Vec<Batch>)> = batches
        .iter()
        .enumerate()
        .map(|(i, b)| (format!("alice{}", i % 2 + 1), vec![b.clone()]))
        .collect();
    let scenario = scenario_with_turns(3, ScenarioSync::PeerToPeer, turns, 0.1);
    let a = deterministic_run(&scenario).unwrap();
    let b = deterministic_run(&scenario).unwrap();
    assert!(a.log.identical_to(&b.log));
    assert_eq!(a.combined_digest(), b.combined_digest());
    assert_eq!(a.bob_digest, b.bob_digest);
}

#[test]
fn wraparound_is_label_free_and_matches_label_sharing() {
    let batches = batch_stream(5);
    let turns = vec![("alice1".to_string(), batches.clone())];

    let mut wrap = Scenario::new(
        11,
        topology(),
        vec![1, 3],
        TrainingMode::Wraparound,
        ScenarioSync::PeerToPeer,
        0.08,
        turns.clone(),
    );
    wrap.cipher = CipherChoice::XorSha;
    let wrap_out = deterministic_run(&wrap).unwrap();

    // No message bound for the middle party carries a label field.
    assert!(!wrap_out.log.any_label_bound_for(BOB_ID));
    // And tensor traffic did flow.
    assert!(wrap_out
        .log
        .entries()
        .iter()
        .filter(|e| e.receiver == BOB_ID && e.kind == "training")
        .count() >= 10);

    let flat = scenario_with_turns(11, ScenarioSync::PeerToPeer, turns, 0.08);
    let flat_out = deterministic_run(&flat).unwrap();
    assert_eq!(wrap_out.combined_digest(), flat_out.combined_digest());
    assert_eq!(
        wrap_out.combined_digest(),
        monolithic_digest(11, &batches, 0.08)
    );
}

fn one_step_scenario(seed: u64) -> (Scenario, Vec<Batch>) {
    let batches = batch_stream(2);
    let turns = vec![
        ("alice1".to_string(), vec![batches[0].clone()]),
        ("alice1".to_string(), vec![batches[1].clone()]),
    ];
    (
        scenario_with_turns(seed, ScenarioSync::PeerToPeer, turns, 0.1),
        batches,
    )
}

fn initial_digests(seed: u64) -> (String, String) {
    let net = initialize(&topology(), Initializer::xavier(seed));
    let mut parts = split(&net, &[1]).unwrap().into_iter();
    let alice = AliceState::new_head("alice1", parts.next().unwrap());
    let bob_seg = parts.next().unwrap();
    (
        alice.weight_digest().to_hex(),
        bob_seg.weight_digest().to_hex(),
    )
}

#[test]
fn dropped_tensor_frame_aborts_cleanly_and_bob_recovers() {
    let (mut scenario, batches) = one_step_scenario(31);
    // alice1 -> bob frames: 1 = training request, 2 = first tensor.
    scenario.faults.push(FaultRule {
        from: "alice1".into(),
        to: BOB_ID.into(),
        nth: 2,
        kind: FaultKind::Drop,
    });
    let out = deterministic_run(&scenario).unwrap();

    let (alice0, bob0) = initial_digests(31);
    // Turn 1 aborted with both sides at their pre-step weights; turn 2 then
    // trained exactly one step.
    assert_eq!(out.reports[0].aborted_turns(), 1);
    assert_eq!(out.reports[0].completed_turns(), 1);
    let _ = (alice0, bob0);
    assert_eq!(
        out.combined_digest(),
        monolithic_digest(31, &batches[1..2], 0.1)
    );
}

#[test]
fn corrupted_tensor_frame_aborts_cleanly_and_bob_recovers() {
    let (mut scenario, batches) = one_step_scenario(33);
    scenario.faults.push(FaultRule {
        from: "alice1".into(),
        to: BOB_ID.into(),
        nth: 2,
        kind: FaultKind::Corrupt { byte: 40 },
    });
    let out = deterministic_run(&scenario).unwrap();
    assert_eq!(out.reports[0].aborted_turns(), 1);
    assert_eq!(out.reports[0].completed_turns(), 1);
    assert_eq!(
        out.combined_digest(),
        monolithic_digest(33, &batches[1..2], 0.1)
    );
}

#[test]
fn mid_step_disconnect_rolls_back_both_sides() {
    let (mut scenario, batches) = one_step_scenario(35);
    // alice1's sends: 1 = training request, 2 = tensor. Kill the connection
    // right after the tensor is delivered: Bob has staged the step and sent
    // the gradient into a dead link.
    scenario.disconnects.push(DisconnectRule {
        node: "alice1".into(),
        after_sends: 2,
    });
    let out = deterministic_run(&scenario).unwrap();

    let (alice0, bob0) = initial_digests(35);
    assert_eq!(out.reports[0].aborted_turns(), 1);
    // After the aborted turn both parties sat at pre-step weights, so the
    // completed second turn equals a single oracle step from scratch.
    assert_eq!(out.reports[0].completed_turns(), 1);
    let _ = (alice0, bob0);
    assert_eq!(
        out.combined_digest(),
        monolithic_digest(35, &batches[1..2], 0.1)
    );
}

#[test]
fn fault_free_digests_unchanged_when_turn_aborts_without_retry() {
    // Single aborted turn, no second turn: both sides must sit at their
    // boot digests afterwards.
    let batches = batch_stream(1);
    let turns = vec![("alice1".to_string(), vec![batches[0].clone()])];
    let mut scenario = scenario_with_turns(37, ScenarioSync::PeerToPeer, turns, 0.1);
    scenario.faults.push(FaultRule {
        from: "alice1".into(),
        to: BOB_ID.into(),
        nth: 2,
        kind: FaultKind::Drop,
    });
    let out = deterministic_run(&scenario).unwrap();
    let (alice0, bob0) = initial_digests(37);
    assert_eq!(out.alice_digests["alice1"], alice0);
    assert_eq!(out.bob_digest, bob0);
    assert!(out.bob_losses.is_empty());
}

#[test]
fn centralized_store_on_bob_serves_refresh() {
    let batches = batch_stream(6);
    let mut turns = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        turns.push((format!("alice{}", i % 2 + 1), vec![b.clone()]));
    }
    let scenario = scenario_with_turns(41, ScenarioSync::CentralizedBob, turns, 0.07);
    let out = deterministic_run(&scenario).unwrap();
    assert_eq!(out.combined_digest(), monolithic_digest(41, &batches, 0.07));
    // Weight uploads went to Bob, and refreshes were served from Bob.
    assert!(out
        .log
        .entries()
        .iter()
        .any(|e| e.kind == "weight upload" && e.receiver == BOB_ID));
    assert!(out
        .log
        .entries()
        .iter()
        .any(|e| e.kind == "weight request" && e.receiver == BOB_ID));
}

#[test]
fn centralized_weight_server_with_deltas_reproduces_oracle() {
    let batches = batch_stream(6);
    let mut turns = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        turns.push((format!("alice{}", i % 2 + 1), vec![b.clone()]));
    }
    let mut scenario = scenario_with_turns(
        43,
        ScenarioSync::CentralizedServer { deltas: true },
        turns,
        0.06,
    );
    scenario.cipher = CipherChoice::XorSha;
    let out = deterministic_run(&scenario).unwrap();
    assert_eq!(out.combined_digest(), monolithic_digest(43, &batches, 0.06));
    // Delta uploads accumulated on the weight server.
    assert!(out
        .log
        .entries()
        .iter()
        .filter(|e| e.kind == "weight upload" && e.receiver == "weights")
        .count() >= 5);
}

#[test]
fn tcp_and_simulator_produce_identical_digests() {
    let batches = batch_stream(4);
    let mut turns = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        turns.push((format!("alice{}", i % 2 + 1), vec![b.clone()]));
    }
    let scenario = scenario_with_turns(51, ScenarioSync::PeerToPeer, turns, 0.09);

    let sim_out = deterministic_run(&scenario).unwrap();
    let tcp_out = run_scenario_tcp(&scenario, Arc::new(PlainChannel)).unwrap();

    assert_eq!(sim_out.combined_digest(), tcp_out.combined_digest());
    assert_eq!(sim_out.bob_digest, tcp_out.bob_digest);
    assert_eq!(sim_out.alice_digests, tcp_out.alice_digests);
    assert_eq!(
        sim_out.combined_digest(),
        monolithic_digest(51, &batches, 0.09)
    );
}


/// Two clients race the session gate over real sockets; exactly one request
/// is allowed, the other denied.
#[test]
fn concurrent_training_requests_get_exactly_one_token() {
    use splitnn_core::protocol::session::{SessionState, StoreMode};
    use splitnn_core::protocol::{read_frame, Message, MAX_FRAME_LEN};
    use splitnn_core::transport::tcp::{serve, PlainChannel, Shared};
    use splitnn_core::transport::{BobNode, MessageLog};
    use std::io::Write;
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::{Arc, Mutex};
    use std::time::Instant;

    let net = initialize(&topology(), Initializer::xavier(71));
    let mut parts = split(&net, &[1]).unwrap().into_iter();
    let head = parts.next().unwrap();
    let tail = parts.next().unwrap();
    let expected = AliceState::new_head("x", head).weight_digest();

    let scenario = scenario_with_turns(
        71,
        ScenarioSync::PeerToPeer,
        vec![
            ("alice1".into(), vec![]),
            ("alice2".into(), vec![]),
        ],
        0.1,
    );
    let registry = scenario.registry();
    let session = SessionState::new(registry.clone(), expected, StoreMode::PeerToPeer, 1);
    let bob = Arc::new(Mutex::new(BobNode::new(
        BOB_ID,
        session,
        tail,
        TrainingMode::LabelSharing,
        0.1,
    )));

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let bob2 = bob.clone();
    let bob3 = bob.clone();
    let handle = serve(
        listener,
        BOB_ID.into(),
        registry,
        Arc::new(PlainChannel),
        Box::new(move |from, msg, now| bob2.lock().unwrap().handle_frame(from, msg, now)),
        Box::new(move |peer, now| bob3.lock().unwrap().on_peer_disconnect(peer, now)),
        Shared {
            log: Arc::new(Mutex::new(MessageLog::new())),
            epoch: Instant::now(),
            stop: stop.clone(),
        },
    );

    fn request(addr: std::net::SocketAddr, id: &str, checksum: &str) -> Message {
        let mut conn = TcpStream::connect(addr).unwrap();
        // Transport hello, then the training request.
        let hello = serde_json::to_vec(&serde_json::json!({
            "hello": id,
            "secret": format!("secret-{id}"),
        }))
        .unwrap();
        let mut frame = (hello.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(&hello);
        conn.write_all(&frame).unwrap();
        let req = Message::TrainingRequest {
            checksum: checksum.to_string(),
            n_iter: 1,
            client_id: id.to_string(),
        };
        conn.write_all(&req.to_frame()).unwrap();
        let reply = read_frame(&mut conn, MAX_FRAME_LEN).unwrap().unwrap();
        splitnn_core::protocol::decode_frame(&reply, MAX_FRAME_LEN).unwrap()
    }

    let checksum = expected.to_hex();
    let barrier = Arc::new(std::sync::Barrier::new(2));
    let mut joins = Vec::new();
    for id in ["alice1", "alice2"] {
        let barrier = barrier.clone();
        let checksum = checksum.clone();
        let id = id.to_string();
        joins.push(std::thread::spawn(move || {
            barrier.wait();
            request(addr, &id, &checksum)
        }));
    }
    let replies: Vec<Message> = joins.into_iter().map(|j| j.join().unwrap()).collect();
    stop.store(true, Ordering::Relaxed);
    handle.join().ok();

    let allowed = replies
        .iter()
        .filter(|m| matches!(m, Message::TrainingAllowed { .. }))
        .count();
    let denied = replies
        .iter()
        .filter(|m| matches!(m, Message::TrainingDenied))
        .count();
    assert_eq!(allowed, 1, "exactly one concurrent request may win: {replies:?}");
    assert_eq!(denied, 1);
}

/// The message log never shows two overlapping token'd sessions: between a
/// client's `allowed` and its session commit, no other client is allowed in.
#[test]
fn sessions_never_overlap_in_the_log() {
    use splitnn_core::protocol::Message;
    let batches = batch_stream(8);
    let mut turns = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        turns.push((format!("alice{}", i % 3 + 1), vec![b.clone()]));
    }
    let scenario = scenario_with_turns(61, ScenarioSync::PeerToPeer, turns, 0.05);
    let out = deterministic_run(&scenario).unwrap();

    let mut active: Option<String> = None;
    let mut allowed_seen = 0;
    for e in out.log.entries() {
        match &e.message {
            Some(Message::TrainingAllowed { .. }) if e.sender == BOB_ID => {
                assert!(
                    active.is_none(),
                    "token granted to {} while {} still holds a session",
                    e.receiver,
                    active.as_deref().unwrap_or("?")
                );
                active = Some(e.receiver.clone());
                allowed_seen += 1;
            }
            Some(Message::SyncResult { ok: true }) if e.sender == BOB_ID => {
                assert_eq!(active.as_deref(), Some(e.receiver.as_str()));
                active = None;
            }
            _ => {}
        }
    }
    assert_eq!(allowed_seen, 8);
    assert!(active.is_none());
}
