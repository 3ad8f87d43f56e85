//! Node roles and the two interchangeable transports: the deterministic
//! in-process simulator and TCP with an optional secure-channel hook.

pub mod alice;
pub mod bob;
pub mod log;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod tcp;

pub use alice::{AliceAction, AliceNode, SessionReport, TurnOutcome, RESPONSE_TIMEOUT};
pub use bob::BobNode;
pub use log::{LogEntry, MessageLog};
pub use scenario::{deterministic_run, RunOutput, Scenario};
pub use server::WeightServerNode;
pub use sim::{DisconnectRule, FaultKind, FaultRule, SimNet};

use thiserror::Error;

use crate::engine::EngineError;
use crate::nn::NetError;
use crate::protocol::ProtocolError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unexpected {kind} from {from}")]
    UnexpectedMessage { from: String, kind: String },
    #[error("{from} is not authorized for this operation")]
    NotAuthorized { from: String },
    #[error("transport error: {0}")]
    Transport(String),
}

/// A node identity plus transport locator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub node_id: String,
    pub address: String,
}

/// Training mode of a deployment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainingMode {
    LabelSharing,
    Wraparound,
    SemiSupervised { alpha: f64 },
}

/// Weight-distribution mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyncConfig {
    /// Weights flow through a store: Bob itself or a dedicated weight
    /// server; `deltas` switches to cumulative weight-delta sync.
    Centralized { store: String, deltas: bool },
    /// The last-trained client serves its weights directly.
    PeerToPeer,
}

/// Length-prefixed container for multiple encrypted blobs in one payload.
pub fn pack_blobs(blobs: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for b in blobs {
        out.extend_from_slice(&(b.len() as u32).to_be_bytes());
        out.extend_from_slice(b);
    }
    out
}

pub fn unpack_blobs(bytes: &[u8]) -> Result<Vec<Vec<u8>>, ProtocolError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let len_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| ProtocolError::Malformed("truncated blob container".into()))?;
        let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let blob = bytes
            .get(pos..pos + len)
            .ok_or_else(|| ProtocolError::Malformed("truncated blob".into()))?;
        out.push(blob.to_vec());
        pos += len;
    }
    Ok(out)
}
