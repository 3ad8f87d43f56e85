//! The client-side session driver.
//!
//! One driver walks its assigned session turns through the full protocol:
//! training request, weight refresh when redirected, the token'd per-batch
//! tensor exchange, and the closing snapshot/upload commit. The driver is
//! poll-based so the same state machine runs under the deterministic
//! scheduler and under blocking TCP loops.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use crate::engine::{AliceSegments, AliceState, EngineError};
use crate::nn::{loss_and_gradient, Batch};
use crate::protocol::{
    extract_tensor, tensor_message, Cipher, LabelPolicy, Message, TensorMode,
};
use crate::tensor::Tensor;
use crate::transport::{Endpoint, NodeError, SyncConfig, TrainingMode};

/// How long either side waits on a silent peer before aborting.
pub const RESPONSE_TIMEOUT: Duration = Duration::from_secs(30);
/// Backoff after a denied training request.
pub const DENIED_BACKOFF: Duration = Duration::from_secs(5);
/// Bounded retries for denied requests.
pub const MAX_DENIED_RETRIES: u32 = 10;
/// Bounded refresh loops per turn.
pub const MAX_REFRESH_ATTEMPTS: u32 = 3;

/// Final status of one session turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnOutcome {
    Completed,
    Aborted(String),
}

/// Per-client run summary.
#[derive(Debug, Clone, Default)]
pub struct SessionReport {
    pub client_id: String,
    pub turns: Vec<TurnOutcome>,
    /// Losses observed client-side (wraparound mode only; in label-sharing
    /// modes the loss is computed by the server).
    pub losses: Vec<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub final_digest: String,
}

impl SessionReport {
    pub fn completed_turns(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| **t == TurnOutcome::Completed)
            .count()
    }

    pub fn aborted_turns(&self) -> usize {
        self.turns.len() - self.completed_turns()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Await {
    RequestReply,
    RefreshPayload,
    /// Label-sharing / semi-supervised: the cut gradient.
    StepGradient,
    /// Wraparound: the middle segment's forward output.
    MiddleForward,
    /// Wraparound: the head-cut gradient after sending the tail's.
    TailGradient,
    CommitReply,
    StoreUploadReply,
}

#[derive(Debug)]
struct ActiveTurn {
    batches: Vec<Batch>,
    next_batch: usize,
    #[allow(dead_code)]
    token: Option<String>,
}

/// What the transport should do after feeding an event to the driver.
#[derive(Debug)]
pub enum AliceAction {
    /// Send this frame.
    Send(Endpoint, Message),
    /// Nothing to transmit right now.
    Idle,
    /// The turn failed on a fatal link error; drop the connection to Bob.
    Abort,
}

pub struct AliceNode {
    id: String,
    secret: String,
    bob: String,
    mode: TrainingMode,
    sync: SyncConfig,
    lr: f64,
    cipher: Arc<dyn Cipher>,
    psk: Vec<u8>,

    engine: AliceState,
    boot_params: Vec<Tensor>,
    turns: VecDeque<Vec<Batch>>,
    active: Option<ActiveTurn>,
    waiting: Option<(Await, Duration)>,
    backoff_until: Option<Duration>,
    denied_retries: u32,
    refresh_attempts: u32,
    has_trained: bool,
    pending_upload: Option<Vec<u8>>,
    pending_reconstruction: Option<Tensor>,
    report: SessionReport,
}

impl AliceNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        secret: impl Into<String>,
        bob: impl Into<String>,
        mode: TrainingMode,
        sync: SyncConfig,
        lr: f64,
        engine: AliceState,
        turns: Vec<Vec<Batch>>,
        cipher: Arc<dyn Cipher>,
        psk: Vec<u8>,
    ) -> Self {
        let id = id.into();
        let boot_params = engine.parameters();
        AliceNode {
            report: SessionReport {
                client_id: id.clone(),
                ..Default::default()
            },
            id,
            secret: secret.into(),
            bob: bob.into(),
            mode,
            sync,
            lr,
            cipher,
            psk,
            engine,
            boot_params,
            turns: turns.into(),
            active: None,
            waiting: None,
            backoff_until: None,
            denied_retries: 0,
            refresh_attempts: 0,
            has_trained: false,
            pending_upload: None,
            pending_reconstruction: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn secret(&self) -> &str {
        &self.secret
    }

    pub fn engine(&self) -> &AliceState {
        &self.engine
    }

    pub fn is_finished(&self) -> bool {
        self.turns.is_empty() && self.active.is_none() && self.waiting.is_none()
    }

    /// Turns ended so far (completed or aborted).
    pub fn turns_taken(&self) -> usize {
        self.report.turns.len()
    }

    pub fn report(&self) -> SessionReport {
        let mut r = self.report.clone();
        r.final_digest = self.engine.weight_digest().to_hex();
        r
    }

    pub fn note_sent(&mut self, bytes: usize) {
        self.report.bytes_up += bytes as u64;
    }

    pub fn note_received(&mut self, bytes: usize) {
        self.report.bytes_down += bytes as u64;
    }

    fn endpoint(&self, node_id: &str) -> Endpoint {
        Endpoint {
            node_id: node_id.to_string(),
            address: node_id.to_string(),
        }
    }

    /// Earliest instant this node needs a wake-up.
    pub fn next_deadline(&self) -> Option<Duration> {
        let mut d = self.backoff_until;
        if let Some((_, sent_at)) = &self.waiting {
            let timeout = *sent_at + RESPONSE_TIMEOUT;
            d = Some(d.map_or(timeout, |x| x.min(timeout)));
        }
        d
    }

    fn abort_turn(&mut self, reason: impl Into<String>) {
        self.report.turns.push(TurnOutcome::Aborted(reason.into()));
        self.active = None;
        self.waiting = None;
        self.backoff_until = None;
        self.denied_retries = 0;
        self.refresh_attempts = 0;
        self.pending_upload = None;
        self.pending_reconstruction = None;
    }

    /// Peer vanished or the transport saw a fatal error on the link.
    pub fn on_disconnect(&mut self, _peer: &str, _now: Duration) {
        if self.active.is_some() || self.waiting.is_some() {
            self.abort_turn("peer disconnected");
        }
    }

    /// Fires the response timeout; true if the turn aborted.
    pub fn on_tick(&mut self, now: Duration) -> bool {
        if let Some((_, sent_at)) = &self.waiting {
            if now.saturating_sub(*sent_at) >= RESPONSE_TIMEOUT {
                self.abort_turn("response timeout");
                return true;
            }
        }
        false
    }

    /// Next frame to send when the driver is ready to act.
    pub fn poll(&mut self, now: Duration) -> Option<(Endpoint, Message)> {
        if self.waiting.is_some() {
            return None;
        }
        if let Some(until) = self.backoff_until {
            if now < until {
                return None;
            }
            self.backoff_until = None;
        }
        if self.active.is_none() {
            let batches = loop {
                match self.turns.pop_front() {
                    Some(b) if b.is_empty() => continue,
                    Some(b) => break b,
                    None => return None,
                }
            };
            self.active = Some(ActiveTurn {
                batches,
                next_batch: 0,
                token: None,
            });
        }
        let n_iter = self.active.as_ref().unwrap().batches.len() as u64;
        let msg = Message::TrainingRequest {
            checksum: self.engine.weight_digest().to_hex(),
            n_iter,
            client_id: self.id.clone(),
        };
        self.waiting = Some((Await::RequestReply, now));
        Some((self.endpoint(&self.bob.clone()), msg))
    }

    fn current_batch(&self) -> Result<Batch, NodeError> {
        let t = self.active.as_ref().ok_or_else(|| NodeError::UnexpectedMessage {
            from: self.bob.clone(),
            kind: "no active turn".into(),
        })?;
        t.batches
            .get(t.next_batch)
            .cloned()
            .ok_or_else(|| NodeError::UnexpectedMessage {
                from: self.bob.clone(),
                kind: "no batch in flight".into(),
            })
    }

    /// Opens the next step: local forward pass, then the tensor frame.
    fn step_opening_frame(&mut self, now: Duration) -> Result<(Endpoint, Message), NodeError> {
        let batch = self.current_batch()?;
        let bob = self.endpoint(&self.bob.clone());
        match self.mode {
            TrainingMode::LabelSharing => {
                let seg = match self.engine.segments_mut() {
                    AliceSegments::Head(s) => s,
                    _ => return Err(EngineError::WrongMode.into()),
                };
                let x = seg.forward(batch.data())?;
                let msg =
                    tensor_message(LabelPolicy::Allowed, &x, batch.label(), TensorMode::Training)?;
                self.waiting = Some((Await::StepGradient, now));
                Ok((bob, msg))
            }
            TrainingMode::SemiSupervised { .. } => {
                let (encoder, decoder) = match self.engine.segments_mut() {
                    AliceSegments::Autoencoder { encoder, decoder } => (encoder, decoder),
                    _ => return Err(EngineError::WrongMode.into()),
                };
                let encoded = encoder.forward(batch.data())?;
                let reconstructed = decoder.forward(&encoded)?;
                self.pending_reconstruction = Some(reconstructed);
                let msg = tensor_message(
                    LabelPolicy::Allowed,
                    &encoded,
                    batch.label(),
                    TensorMode::Training,
                )?;
                self.waiting = Some((Await::StepGradient, now));
                Ok((bob, msg))
            }
            TrainingMode::Wraparound => {
                let head = match self.engine.segments_mut() {
                    AliceSegments::Wraparound { head, .. } => head,
                    _ => return Err(EngineError::WrongMode.into()),
                };
                let x = head.forward(batch.data())?;
                // Labels stay local in this mode, enforced structurally.
                let msg = tensor_message(LabelPolicy::Forbidden, &x, None, TensorMode::Training)?;
                self.waiting = Some((Await::MiddleForward, now));
                Ok((bob, msg))
            }
        }
    }

    /// The frame that closes this turn: snapshot to Bob (peer-to-peer and
    /// external-store flows) or weight upload to Bob when Bob is the store.
    fn commit_frame(&mut self, now: Duration) -> (Endpoint, Message) {
        let digest = self.engine.weight_digest().to_hex();
        let bob = self.endpoint(&self.bob.clone());
        match self.sync.clone() {
            SyncConfig::PeerToPeer => {
                self.waiting = Some((Await::CommitReply, now));
                (
                    bob,
                    Message::Snapshot {
                        checksum: digest,
                        client_id: self.id.clone(),
                    },
                )
            }
            SyncConfig::Centralized { store, deltas } => {
                let plaintext = if deltas {
                    crate::engine::compute_delta(&self.engine).to_bytes()
                } else {
                    self.engine.weight_bytes()
                };
                let blob = self.cipher.encrypt(&self.psk, &plaintext);
                if store == self.bob {
                    // Bob-as-store: the upload itself is the session commit.
                    self.waiting = Some((Await::CommitReply, now));
                    (
                        bob,
                        Message::WeightUpload {
                            checksum: digest,
                            weights: blob,
                            client_id: self.id.clone(),
                        },
                    )
                } else {
                    // External store: commit to Bob via snapshot first, then
                    // upload to the store once Bob acknowledges.
                    self.pending_upload = Some(blob);
                    self.waiting = Some((Await::CommitReply, now));
                    (
                        bob,
                        Message::Snapshot {
                            checksum: digest,
                            client_id: self.id.clone(),
                        },
                    )
                }
            }
        }
    }

    fn finish_turn(&mut self) {
        self.report.turns.push(TurnOutcome::Completed);
        self.has_trained = true;
        self.engine.reset_initial();
        self.active = None;
        self.waiting = None;
        self.denied_retries = 0;
        self.refresh_attempts = 0;
    }

    /// Applies a fetched weight payload (refresh path).
    fn apply_refresh(&mut self, blob: &[u8]) -> Result<(), NodeError> {
        match &self.sync {
            SyncConfig::Centralized { deltas: true, .. } => {
                let mut all = Vec::new();
                for enc in crate::transport::unpack_blobs(blob)? {
                    let plain = self.cipher.decrypt(&self.psk, &enc);
                    all.extend(crate::engine::WeightDelta::parse_stream(&plain)?);
                }
                let params = crate::engine::apply_delta(&self.boot_params, &all)?;
                self.engine.set_parameters(&params)?;
            }
            _ => {
                let plain = self.cipher.decrypt(&self.psk, blob);
                self.engine.load_weight_bytes(&plain)?;
            }
        }
        self.engine.reset_initial();
        Ok(())
    }

    fn advance_batch(&mut self, now: Duration) -> AliceAction {
        let done = {
            let t = self.active.as_mut().expect("active turn");
            t.next_batch += 1;
            t.next_batch >= t.batches.len()
        };
        if done {
            let (ep, msg) = self.commit_frame(now);
            AliceAction::Send(ep, msg)
        } else {
            match self.step_opening_frame(now) {
                Ok((ep, msg)) => AliceAction::Send(ep, msg),
                Err(e) => {
                    self.abort_turn(e.to_string());
                    AliceAction::Abort
                }
            }
        }
    }

    fn apply_step_gradient(&mut self, msg: &Message, now: Duration) -> Result<AliceAction, NodeError> {
        let (gradient, _) = extract_tensor(msg)?;
        let batch = self.current_batch()?;
        let lr = self.lr;
        let alpha = self.engine.alpha();
        let reconstruction = self.pending_reconstruction.take();
        match self.engine.segments_mut() {
            AliceSegments::Head(seg) => {
                seg.backward(&gradient, lr)?;
            }
            AliceSegments::Autoencoder { encoder, decoder } => {
                let reconstructed = reconstruction.ok_or_else(|| NodeError::UnexpectedMessage {
                    from: self.bob.clone(),
                    kind: "gradient without a pending reconstruction".into(),
                })?;
                let (_, rec_out_grad) = loss_and_gradient(
                    crate::nn::LossKind::MeanSquared,
                    &reconstructed,
                    batch.data(),
                )?;
                let rec_cut = decoder.backward(&rec_out_grad, lr)?;
                let combined = gradient.add(&rec_cut.scale(alpha)?)?;
                encoder.backward(&combined, lr)?;
            }
            AliceSegments::Wraparound { .. } => return Err(EngineError::WrongMode.into()),
        }
        Ok(self.advance_batch(now))
    }

    fn apply_middle_forward(&mut self, msg: &Message, now: Duration) -> Result<AliceAction, NodeError> {
        let (middle, _) = extract_tensor(msg)?;
        let batch = self.current_batch()?;
        let lr = self.lr;
        let (tail_cut, loss) = {
            let tail = match self.engine.segments_mut() {
                AliceSegments::Wraparound { tail, .. } => tail,
                _ => return Err(EngineError::WrongMode.into()),
            };
            let kind = tail.loss_kind().ok_or(EngineError::NoLossHead)?;
            let output = tail.forward(&middle)?;
            let label = batch.label().ok_or(EngineError::MissingLabels)?;
            let (loss, gradient) = loss_and_gradient(kind, &output, label)?;
            (tail.backward(&gradient, lr)?, loss)
        };
        self.report.losses.push(loss);
        let reply = tensor_message(LabelPolicy::Forbidden, &tail_cut, None, TensorMode::Training)?;
        self.waiting = Some((Await::TailGradient, now));
        Ok(AliceAction::Send(self.endpoint(&self.bob.clone()), reply))
    }

    fn apply_tail_gradient(&mut self, msg: &Message, now: Duration) -> Result<AliceAction, NodeError> {
        let (gradient, _) = extract_tensor(msg)?;
        let lr = self.lr;
        let head = match self.engine.segments_mut() {
            AliceSegments::Wraparound { head, .. } => head,
            _ => return Err(EngineError::WrongMode.into()),
        };
        head.backward(&gradient, lr)?;
        Ok(self.advance_batch(now))
    }

    /// Handles the response to whatever this driver last sent.
    pub fn on_message(&mut self, _from: &str, msg: Message, now: Duration) -> AliceAction {
        let (awaiting, _) = match self.waiting.take() {
            Some(w) => w,
            None => {
                // Unsolicited frame; ignore rather than corrupt state.
                return AliceAction::Idle;
            }
        };
        match (awaiting, msg) {
            (Await::RequestReply, Message::TrainingAllowed { token }) => {
                self.refresh_attempts = 0;
                if let Some(t) = &mut self.active {
                    t.token = Some(token);
                }
                match self.step_opening_frame(now) {
                    Ok((ep, m)) => AliceAction::Send(ep, m),
                    Err(e) => {
                        self.abort_turn(e.to_string());
                        AliceAction::Abort
                    }
                }
            }
            (Await::RequestReply, Message::TrainingDenied) => {
                self.denied_retries += 1;
                if self.denied_retries > MAX_DENIED_RETRIES {
                    self.abort_turn("denied too many times");
                } else {
                    self.backoff_until = Some(now + DENIED_BACKOFF);
                }
                AliceAction::Idle
            }
            (Await::RequestReply, Message::RefreshRequired { client, address }) => {
                self.refresh_attempts += 1;
                if self.refresh_attempts > MAX_REFRESH_ATTEMPTS {
                    self.abort_turn("refresh loop exceeded bound");
                    return AliceAction::Idle;
                }
                let target = match &self.sync {
                    SyncConfig::Centralized { store, .. } => Endpoint {
                        node_id: store.clone(),
                        address: store.clone(),
                    },
                    SyncConfig::PeerToPeer => Endpoint {
                        node_id: client,
                        address,
                    },
                };
                self.waiting = Some((Await::RefreshPayload, now));
                AliceAction::Send(
                    target,
                    Message::WeightRequest {
                        client_id: self.id.clone(),
                    },
                )
            }
            (Await::RefreshPayload, Message::WeightPayload { weights }) => {
                match self.apply_refresh(&weights) {
                    Ok(()) => {
                        let msg = Message::TrainingRequest {
                            checksum: self.engine.weight_digest().to_hex(),
                            n_iter: self
                                .active
                                .as_ref()
                                .map(|t| t.batches.len() as u64)
                                .unwrap_or(0),
                            client_id: self.id.clone(),
                        };
                        self.waiting = Some((Await::RequestReply, now));
                        AliceAction::Send(self.endpoint(&self.bob.clone()), msg)
                    }
                    Err(e) => {
                        self.abort_turn(format!("refresh failed: {e}"));
                        AliceAction::Abort
                    }
                }
            }
            (Await::RefreshPayload, Message::WeightDenied { reason }) => {
                self.abort_turn(format!("refresh source refused: {reason}"));
                AliceAction::Idle
            }
            (Await::StepGradient, msg @ Message::TensorTransmission { .. }) => {
                match self.apply_step_gradient(&msg, now) {
                    Ok(action) => action,
                    Err(e) => {
                        self.abort_turn(e.to_string());
                        AliceAction::Abort
                    }
                }
            }
            (Await::MiddleForward, msg @ Message::TensorTransmission { .. }) => {
                match self.apply_middle_forward(&msg, now) {
                    Ok(action) => action,
                    Err(e) => {
                        self.abort_turn(e.to_string());
                        AliceAction::Abort
                    }
                }
            }
            (Await::TailGradient, msg @ Message::TensorTransmission { .. }) => {
                match self.apply_tail_gradient(&msg, now) {
                    Ok(action) => action,
                    Err(e) => {
                        self.abort_turn(e.to_string());
                        AliceAction::Abort
                    }
                }
            }
            (Await::CommitReply, Message::SyncResult { ok }) => {
                if !ok {
                    self.abort_turn("commit rejected");
                    return AliceAction::Idle;
                }
                if let Some(blob) = self.pending_upload.take() {
                    let store = match &self.sync {
                        SyncConfig::Centralized { store, .. } => store.clone(),
                        SyncConfig::PeerToPeer => unreachable!("upload only in centralized mode"),
                    };
                    let msg = Message::WeightUpload {
                        checksum: self.engine.weight_digest().to_hex(),
                        weights: blob,
                        client_id: self.id.clone(),
                    };
                    self.waiting = Some((Await::StoreUploadReply, now));
                    return AliceAction::Send(self.endpoint(&store), msg);
                }
                self.finish_turn();
                AliceAction::Idle
            }
            (Await::StoreUploadReply, Message::SyncResult { ok }) => {
                if ok {
                    self.finish_turn();
                } else {
                    self.abort_turn("store rejected upload");
                }
                AliceAction::Idle
            }
            (_, other) => {
                self.abort_turn(format!("unexpected {}", other.log_kind()));
                AliceAction::Abort
            }
        }
    }

    /// Serves a peer-to-peer weight request against this client's weights.
    pub fn handle_peer_request(&self, _from: &str, msg: &Message) -> Message {
        match msg {
            Message::WeightRequest { .. } if self.has_trained => {
                let blob = self.cipher.encrypt(&self.psk, &self.engine.weight_bytes());
                Message::WeightPayload { weights: blob }
            }
            Message::WeightRequest { .. } => Message::WeightDenied {
                reason: crate::protocol::session::REASON_ALICE_NEVER_TRAINED.to_string(),
            },
            _ => Message::WeightDenied {
                reason: "unsupported request".to_string(),
            },
        }
    }
}
