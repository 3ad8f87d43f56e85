//! Split neural-network training: a deterministic neural core, split
//! training over one or many data agents, the agent/server wire protocol,
//! interchangeable transports, and cost-accounting baselines.
//!
//! The layering is strict: `tensor` and `nn` know nothing of distribution;
//! `engine` orchestrates training steps over abstract segments; `protocol`
//! defines bit-exact messages; `transport` moves frames between node actors;
//! `baselines`, `data`, and `harness` provide the experiment surface.

pub mod baselines;
pub mod data;
pub mod harness;
pub mod engine;
pub mod eval;
pub mod nn;
pub mod protocol;
pub mod tensor;
pub mod transport;

pub use data::{Dataset, ShardPolicy};
pub use harness::{ExperimentConfig, ResultRecord};
pub use engine::{AliceState, BobState, EngineError, RefreshMode, WeightDelta};
pub use protocol::{Message, ProtocolError, SessionState};
pub use transport::{MessageLog, Scenario, TrainingMode};
pub use nn::{Batch, Initializer, LayerSpec, LossKind, NetworkTopology, SegmentNet};
pub use tensor::{Tensor, TensorChecksum};
