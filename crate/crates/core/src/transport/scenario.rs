//! Scenario assembly: builds a full deployment (clients, server, optional
//! weight store) from a declarative description and runs it to completion on
//! the deterministic transport.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use crate::engine::AliceState;
use crate::nn::{initialize, split, Batch, Initializer, LayerSpec, NetworkTopology};
use crate::protocol::session::{ClientRegistry, SessionState, StoreMode};
use crate::protocol::{Cipher, IdentityCipher, XorShaStreamCipher};
use crate::transport::alice::{AliceNode, SessionReport};
use crate::transport::bob::BobNode;
use crate::transport::log::MessageLog;
use crate::transport::server::WeightServerNode;
use crate::transport::sim::{Deployment, DisconnectRule, FaultRule, SimNet, SimRunner};
use crate::transport::{NodeError, SyncConfig, TrainingMode};

pub const BOB_ID: &str = "bob";
pub const WEIGHT_SERVER_ID: &str = "weights";

/// Weight-distribution deployment shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioSync {
    PeerToPeer,
    /// Bob doubles as the weight store.
    CentralizedBob,
    /// A dedicated weight server holds blobs; `deltas` switches to
    /// cumulative weight-delta sync.
    CentralizedServer { deltas: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipherChoice {
    Identity,
    XorSha,
}

/// A complete deterministic experiment: topology, split, schedule, faults.
#[derive(Clone)]
pub struct Scenario {
    pub seed: u64,
    pub topology: NetworkTopology,
    pub cuts: Vec<usize>,
    pub mode: TrainingMode,
    pub sync: ScenarioSync,
    pub lr: f64,
    /// Session turns in global order: (client id, batches of that session).
    pub turns: Vec<(String, Vec<Batch>)>,
    pub faults: Vec<FaultRule>,
    pub disconnects: Vec<DisconnectRule>,
    pub cipher: CipherChoice,
    pub psk: Vec<u8>,
}

impl Scenario {
    pub fn new(
        seed: u64,
        topology: NetworkTopology,
        cuts: Vec<usize>,
        mode: TrainingMode,
        sync: ScenarioSync,
        lr: f64,
        turns: Vec<(String, Vec<Batch>)>,
    ) -> Self {
        Scenario {
            seed,
            topology,
            cuts,
            mode,
            sync,
            lr,
            turns,
            faults: Vec::new(),
            disconnects: Vec::new(),
            cipher: CipherChoice::Identity,
            psk: b"pre-shared-key".to_vec(),
        }
    }

    pub fn client_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for (id, _) in &self.turns {
            if !ids.contains(id) {
                ids.push(id.clone());
            }
        }
        ids
    }

    fn cipher(&self) -> Arc<dyn Cipher> {
        match self.cipher {
            CipherChoice::Identity => Arc::new(IdentityCipher),
            CipherChoice::XorSha => Arc::new(XorShaStreamCipher),
        }
    }

    /// Splits the seeded topology into the client-side state and Bob's
    /// segment per the training mode.
    pub fn build_segments(&self) -> Result<(AliceStateTemplate, crate::nn::SegmentNet), NodeError> {
        let net = initialize(&self.topology, Initializer::xavier(self.seed));
        match self.mode {
            TrainingMode::LabelSharing => {
                if self.cuts.len() != 1 {
                    return Err(NodeError::Transport(
                        "label-sharing needs exactly one cut".into(),
                    ));
                }
                let mut parts = split(&net, &self.cuts)?.into_iter();
                let head = parts.next().unwrap();
                let tail = parts.next().unwrap();
                Ok((AliceStateTemplate::Head(head), tail))
            }
            TrainingMode::Wraparound => {
                if self.cuts.len() != 2 {
                    return Err(NodeError::Transport(
                        "wraparound needs exactly two cuts".into(),
                    ));
                }
                let mut parts = split(&net, &self.cuts)?.into_iter();
                let head = parts.next().unwrap();
                let middle = parts.next().unwrap();
                let tail = parts.next().unwrap();
                Ok((AliceStateTemplate::Wraparound { head, tail }, middle))
            }
            TrainingMode::SemiSupervised { alpha } => {
                let (m, n) = self.topology.branch().ok_or_else(|| {
                    NodeError::Transport(
                        "semi-supervised mode needs a branched autoencoder topology".into(),
                    )
                })?;
                let mut parts = split(&net, &[m, n])?.into_iter();
                let encoder = parts.next().unwrap();
                let decoder = parts.next().unwrap();
                let tail = parts.next().unwrap();
                Ok((
                    AliceStateTemplate::Autoencoder {
                        encoder,
                        decoder,
                        alpha,
                    },
                    tail,
                ))
            }
        }
    }

    pub fn registry(&self) -> ClientRegistry {
        self.registry_with_addresses(&BTreeMap::new())
    }

    /// Registry whose client addresses come from a transport address book
    /// (node id itself when absent, as in the simulator).
    pub fn registry_with_addresses(&self, book: &BTreeMap<String, String>) -> ClientRegistry {
        let mut registry = ClientRegistry::new();
        for id in self.client_ids() {
            let address = book.get(&id).cloned().unwrap_or_else(|| id.clone());
            registry.register(&id, format!("secret-{id}"), address);
        }
        registry
    }

    fn sync_config(&self) -> SyncConfig {
        match self.sync {
            ScenarioSync::PeerToPeer => SyncConfig::PeerToPeer,
            ScenarioSync::CentralizedBob => SyncConfig::Centralized {
                store: BOB_ID.to_string(),
                deltas: false,
            },
            ScenarioSync::CentralizedServer { deltas } => SyncConfig::Centralized {
                store: WEIGHT_SERVER_ID.to_string(),
                deltas,
            },
        }
    }

    /// Builds the full deployment (all node actors) for this scenario.
    pub fn build_deployment(&self) -> Result<Deployment, NodeError> {
        self.build_deployment_with_addresses(&BTreeMap::new())
    }

    /// Deployment whose registry carries transport addresses.
    pub fn build_deployment_with_addresses(
        &self,
        book: &BTreeMap<String, String>,
    ) -> Result<Deployment, NodeError> {
        let (template, bob_segment) = self.build_segments()?;
        let registry = self.registry_with_addresses(book);
        let cipher = self.cipher();

        let mut turns_by_client: BTreeMap<String, Vec<Vec<Batch>>> = BTreeMap::new();
        for (id, batches) in &self.turns {
            turns_by_client
                .entry(id.clone())
                .or_default()
                .push(batches.clone());
        }

        let store_mode = match self.sync {
            ScenarioSync::CentralizedBob => StoreMode::Centralized,
            _ => StoreMode::PeerToPeer,
        };

        let mut alices = Vec::new();
        let mut expected = None;
        for id in self.client_ids() {
            let engine = template.instantiate(&id);
            expected.get_or_insert_with(|| engine.weight_digest());
            alices.push(AliceNode::new(
                &id,
                format!("secret-{id}"),
                BOB_ID,
                self.mode,
                self.sync_config(),
                self.lr,
                engine,
                turns_by_client.remove(&id).unwrap_or_default(),
                cipher.clone(),
                self.psk.clone(),
            ));
        }
        let expected = expected
            .ok_or_else(|| NodeError::Transport("scenario has no client turns".into()))?;

        let session = SessionState::new(registry.clone(), expected, store_mode, self.seed ^ 0xB0B);
        let bob = BobNode::new(BOB_ID, session, bob_segment, self.mode, self.lr);

        let server = match self.sync {
            ScenarioSync::CentralizedServer { deltas } => Some(WeightServerNode::new(
                WEIGHT_SERVER_ID,
                registry,
                deltas,
            )),
            _ => None,
        };

        Ok(Deployment {
            alices,
            bob,
            server,
            turn_order: self.turns.iter().map(|(id, _)| id.clone()).collect(),
        })
    }

    fn delivery_budget(&self) -> u64 {
        let batches: usize = self.turns.iter().map(|(_, b)| b.len()).sum();
        (1000 + self.turns.len() as u64 * 16 + batches as u64 * 10) * 3
    }
}

/// Client-side segment template, instantiated per client id.
pub enum AliceStateTemplate {
    Head(crate::nn::SegmentNet),
    Autoencoder {
        encoder: crate::nn::SegmentNet,
        decoder: crate::nn::SegmentNet,
        alpha: f64,
    },
    Wraparound {
        head: crate::nn::SegmentNet,
        tail: crate::nn::SegmentNet,
    },
}

impl AliceStateTemplate {
    pub fn instantiate(&self, client_id: &str) -> AliceState {
        match self {
            AliceStateTemplate::Head(s) => AliceState::new_head(client_id, s.clone()),
            AliceStateTemplate::Autoencoder {
                encoder,
                decoder,
                alpha,
            } => AliceState::new_autoencoder(client_id, encoder.clone(), decoder.clone(), *alpha),
            AliceStateTemplate::Wraparound { head, tail } => {
                AliceState::new_wraparound(client_id, head.clone(), tail.clone())
            }
        }
    }
}

/// Results of a deterministic run.
pub struct RunOutput {
    pub log: MessageLog,
    pub reports: Vec<SessionReport>,
    pub bob_digest: String,
    /// Per-step losses observed server-side (label-sharing modes) -- empty
    /// in wraparound mode, where the loss lives client-side.
    pub bob_losses: Vec<f64>,
    pub alice_digests: BTreeMap<String, String>,
    pub last_trained: Option<String>,
    /// The classifier path of the final network (last-trained client's
    /// layers up to the cut, then Bob's, then the wraparound tail if any),
    /// usable directly for evaluation.
    pub final_layers: Vec<LayerSpec>,
    pub final_time: Duration,
    pub deliveries: u64,
}

impl RunOutput {
    /// Digest over the reassembled classifier-path weights.
    pub fn combined_digest(&self) -> String {
        crate::nn::weights::weight_digest(&self.final_layers).to_hex()
    }
}

fn assemble_final_layers(dep: &Deployment) -> (Option<String>, Vec<LayerSpec>) {
    let last = dep.bob.session().last_trained().map(|s| s.to_string());
    let alice = last
        .as_deref()
        .and_then(|id| dep.alices.iter().find(|a| a.id() == id))
        .or_else(|| dep.alices.first());
    let mut layers = Vec::new();
    if let Some(alice) = alice {
        match alice.engine().segments() {
            crate::engine::AliceSegments::Head(s) => {
                layers.extend_from_slice(s.layers());
                layers.extend_from_slice(dep.bob.segment().layers());
            }
            crate::engine::AliceSegments::Autoencoder { encoder, .. } => {
                layers.extend_from_slice(encoder.layers());
                layers.extend_from_slice(dep.bob.segment().layers());
            }
            crate::engine::AliceSegments::Wraparound { head, tail } => {
                layers.extend_from_slice(head.layers());
                layers.extend_from_slice(dep.bob.segment().layers());
                layers.extend_from_slice(tail.layers());
            }
        }
    }
    (last, layers)
}

pub fn collect_output(dep: &Deployment, log: MessageLog, final_time: Duration, deliveries: u64) -> RunOutput {
    let (last_trained, final_layers) = assemble_final_layers(dep);
    RunOutput {
        log,
        reports: dep.alices.iter().map(|a| a.report()).collect(),
        bob_digest: dep.bob.weight_digest_hex(),
        bob_losses: dep.bob.losses().to_vec(),
        alice_digests: dep
            .alices
            .iter()
            .map(|a| (a.id().to_string(), a.engine().weight_digest().to_hex()))
            .collect(),
        last_trained,
        final_layers,
        final_time,
        deliveries,
    }
}

/// Runs the scenario on the deterministic in-process transport. The entire
/// run -- every message byte and final digest -- is reproducible bitwise
/// across repeated executions.
pub fn deterministic_run(scenario: &Scenario) -> Result<RunOutput, NodeError> {
    let mut dep = scenario.build_deployment()?;
    let net = SimNet {
        faults: scenario.faults.clone(),
        disconnects: scenario.disconnects.clone(),
    };
    let outcome = SimRunner::new(&mut dep, net).run(scenario.delivery_budget())?;
    Ok(collect_output(
        &dep,
        outcome.log,
        outcome.final_time,
        outcome.deliveries,
    ))
}
