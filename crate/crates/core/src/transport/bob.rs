//! The serving actor wrapping the protocol session gate around the neural
//! segment.
//!
//! Steps are transactional: a pre-step snapshot of the segment is held until
//! the client's next frame acknowledges the step; disconnects, timeouts, and
//! integrity failures restore the snapshot, so an aborted step leaves Bob's
//! weights bitwise-equal to their pre-step values.

use std::time::Duration;

use crate::nn::{loss_and_gradient, SegmentNet};
use crate::protocol::{
    extract_tensor, tensor_message, LabelPolicy, Message, ProtocolError, SessionState, TensorMode,
};
use crate::transport::{NodeError, TrainingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepPhase {
    /// Awaiting a tensor frame that opens a step.
    Ready,
    /// Wraparound: middle forward served, awaiting the tail-cut gradient.
    AwaitWrapGradient,
}

struct StagedStep {
    snapshot: SegmentNet,
    loss: Option<f64>,
}

pub struct BobNode {
    id: String,
    session: SessionState,
    segment: SegmentNet,
    mode: TrainingMode,
    lr: f64,
    staged: Option<StagedStep>,
    phase: StepPhase,
    losses: Vec<f64>,
}

impl BobNode {
    pub fn new(
        id: impl Into<String>,
        session: SessionState,
        segment: SegmentNet,
        mode: TrainingMode,
        lr: f64,
    ) -> Self {
        BobNode {
            id: id.into(),
            session,
            segment,
            mode,
            lr,
            staged: None,
            phase: StepPhase::Ready,
            losses: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn session(&self) -> &SessionState {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut SessionState {
        &mut self.session
    }

    pub fn segment(&self) -> &SegmentNet {
        &self.segment
    }

    /// Per-step losses observed server-side (label-sharing modes).
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn weight_digest_hex(&self) -> String {
        self.segment.weight_digest().to_hex()
    }

    fn commit_staged(&mut self) {
        if let Some(staged) = self.staged.take() {
            if let Some(loss) = staged.loss {
                self.losses.push(loss);
            }
        }
    }

    fn rollback_staged(&mut self) {
        if let Some(staged) = self.staged.take() {
            self.segment = staged.snapshot;
        }
        self.phase = StepPhase::Ready;
    }

    /// Expires tokens and idle sessions, rolling back any staged step of a
    /// revoked session.
    pub fn on_tick(&mut self, now: Duration) {
        if let Some(revoked) = self.session.tick(now) {
            if revoked.was_training {
                self.rollback_staged();
            }
        }
    }

    /// Peer connection dropped: abort its session and roll back.
    pub fn on_peer_disconnect(&mut self, peer: &str, _now: Duration) {
        if let Some(revoked) = self.session.abort_session(peer) {
            if revoked.was_training {
                self.rollback_staged();
            }
        }
    }

    /// Ensures `from` holds the active session, consuming a freshly issued
    /// token on the session's first tensor frame.
    fn require_trainer(&mut self, from: &str, now: Duration) -> Result<(), NodeError> {
        if self.session.current_trainer() == Some(from) {
            return Ok(());
        }
        if self.session.issued_to() == Some(from) {
            let value = self
                .session
                .issued_token_value()
                .expect("token value present when issued")
                .to_string();
            if self.session.validate_token(&value, now) {
                return Ok(());
            }
        }
        Err(NodeError::NotAuthorized { from: from.into() })
    }

    /// Handles one authenticated frame; returns the reply. Errors are
    /// connection-fatal for this peer only.
    pub fn handle_frame(
        &mut self,
        from: &str,
        msg: Message,
        now: Duration,
    ) -> Result<Message, NodeError> {
        self.on_tick(now);
        match msg {
            Message::TrainingRequest {
                checksum,
                n_iter,
                client_id,
            } => {
                if client_id != from {
                    return Err(NodeError::NotAuthorized { from: from.into() });
                }
                Ok(self
                    .session
                    .handle_training_request(&client_id, &checksum, n_iter, now)?)
            }
            msg @ Message::TensorTransmission {
                mode: TensorMode::Validation,
                ..
            } => {
                // Forward-only evaluation path; params and caches of an
                // in-flight step must not be disturbed.
                if self.phase != StepPhase::Ready {
                    return Err(NodeError::UnexpectedMessage {
                        from: from.into(),
                        kind: "validation frame mid-step".into(),
                    });
                }
                let (x, _) = extract_tensor(&msg)?;
                let mut scratch = self.segment.clone();
                let y = scratch.forward(&x)?;
                Ok(tensor_message(
                    LabelPolicy::Forbidden,
                    &y,
                    None,
                    TensorMode::Validation,
                )?)
            }
            msg @ Message::TensorTransmission {
                mode: TensorMode::Training,
                ..
            } => {
                self.require_trainer(from, now)?;
                match self.phase {
                    StepPhase::Ready => self.open_step(from, &msg, now),
                    StepPhase::AwaitWrapGradient => self.finish_wrap_step(&msg, now),
                }
            }
            Message::Snapshot {
                checksum,
                client_id,
            } => {
                if client_id != from {
                    return Err(NodeError::NotAuthorized { from: from.into() });
                }
                if self.session.current_trainer() == Some(from) {
                    self.commit_staged();
                }
                Ok(self.session.handle_snapshot(&client_id, &checksum))
            }
            Message::WeightUpload {
                checksum,
                weights,
                client_id,
            } => {
                if client_id != from {
                    return Err(NodeError::NotAuthorized { from: from.into() });
                }
                if self.session.current_trainer() == Some(from) {
                    self.commit_staged();
                }
                Ok(self.session.handle_weight_upload(&client_id, &checksum, weights))
            }
            Message::WeightRequest { client_id } => {
                if client_id != from {
                    return Err(NodeError::NotAuthorized { from: from.into() });
                }
                Ok(self.session.handle_weight_request(&client_id)?)
            }
            other => Err(NodeError::UnexpectedMessage {
                from: from.into(),
                kind: other.log_kind(),
            }),
        }
    }

    /// Opens a step: commits the previously staged step (this frame is its
    /// acknowledgement), snapshots pre-step weights, and runs this server's
    /// share of the step.
    fn open_step(
        &mut self,
        from: &str,
        msg: &Message,
        now: Duration,
    ) -> Result<Message, NodeError> {
        if self.session.remaining_steps() == Some(0) {
            return Err(NodeError::UnexpectedMessage {
                from: from.into(),
                kind: "tensor frame past the requested iteration count".into(),
            });
        }
        let (x, label) = extract_tensor(msg)?;
        self.commit_staged();
        let snapshot = self.segment.clone();

        match self.mode {
            TrainingMode::LabelSharing | TrainingMode::SemiSupervised { .. } => {
                let label = label.ok_or(crate::engine::EngineError::MissingLabels)?;
                let kind = self
                    .segment
                    .loss_kind()
                    .ok_or(crate::engine::EngineError::NoLossHead)?;
                let output = self.segment.forward(&x)?;
                let (loss, gradient) = loss_and_gradient(kind, &output, &label)?;
                let cut_gradient = self.segment.backward(&gradient, self.lr)?;
                self.staged = Some(StagedStep {
                    snapshot,
                    loss: Some(loss),
                });
                self.session.record_steps(1, now);
                Ok(tensor_message(
                    LabelPolicy::Allowed,
                    &cut_gradient,
                    None,
                    TensorMode::Training,
                )?)
            }
            TrainingMode::Wraparound => {
                if label.is_some() {
                    // Labels must never reach this side in wraparound mode.
                    return Err(NodeError::Protocol(ProtocolError::LabelForbidden));
                }
                let y = self.segment.forward(&x)?;
                self.staged = Some(StagedStep {
                    snapshot,
                    loss: None,
                });
                self.phase = StepPhase::AwaitWrapGradient;
                self.session.record_steps(0, now);
                Ok(tensor_message(
                    LabelPolicy::Forbidden,
                    &y,
                    None,
                    TensorMode::Training,
                )?)
            }
        }
    }

    /// Wraparound second exchange: backpropagates the tail-cut gradient and
    /// returns the head-cut gradient.
    fn finish_wrap_step(&mut self, msg: &Message, now: Duration) -> Result<Message, NodeError> {
        let (gradient, label) = extract_tensor(msg)?;
        if label.is_some() {
            return Err(NodeError::Protocol(ProtocolError::LabelForbidden));
        }
        let head_cut = self.segment.backward(&gradient, self.lr)?;
        self.phase = StepPhase::Ready;
        self.session.record_steps(1, now);
        Ok(tensor_message(
            LabelPolicy::Forbidden,
            &head_cut,
            None,
            TensorMode::Training,
        )?)
    }
}
