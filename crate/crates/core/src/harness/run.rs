//! Experiment execution: dataset loading, schedule construction, the run
//! itself (over either transport), and the deterministic result record.

use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::baselines::{segment_flops, ClientCosts, CostLedger, Pass};
use crate::data::mnist::MNIST_DIR_ENV;
use crate::data::{DataError, Dataset};
use crate::engine::AliceSegments;
use crate::eval::accuracy;
use crate::harness::config::{
    ConfigError, DatasetSpec, ExperimentConfig, ModeSpec, SchedulePolicy, SyncSpec,
    TransportChoice,
};
use crate::nn::{Batch, NetError, SegmentNet};
use crate::transport::scenario::{CipherChoice, ScenarioSync};
use crate::transport::tcp::{run_scenario_tcp, PlainChannel};
use crate::transport::{deterministic_run, NodeError, RunOutput, Scenario, TrainingMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("mnist files unavailable: {0}")]
    MnistUnavailable(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The deterministic outcome of one experiment run. Two executions of one
/// config produce byte-identical records (timestamps and transport details
/// are deliberately excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub config_hash: String,
    pub per_epoch_train_loss: Vec<f64>,
    pub final_test_accuracy: f64,
    pub final_weight_digest: String,
    /// Per-client summary: analytic flops, measured transfer bytes.
    pub client_costs: Vec<(String, ClientCosts)>,
    pub step_losses: Vec<f64>,
}

impl ResultRecord {
    /// Canonical CSV: one row per epoch plus a summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("experiment,{}\n", self.experiment_id));
        out.push_str(&format!("config_hash,{}\n", self.config_hash));
        out.push_str(&format!("final_test_accuracy,{:.6}\n", self.final_test_accuracy));
        out.push_str(&format!("final_weight_digest,{}\n", self.final_weight_digest));
        for (client, costs) in &self.client_costs {
            out.push_str(&format!(
                "client,{client},flops,{},bytes_up,{},bytes_down,{}\n",
                costs.flops, costs.bytes_up, costs.bytes_down
            ));
        }
        out.push_str("epoch,train_loss\n");
        for (i, loss) in self.per_epoch_train_loss.iter().enumerate() {
            out.push_str(&format!("{},{:.12}\n", i + 1, loss));
        }
        out
    }
}

/// Where generated digit corpora live (deterministic per parameters).
fn digits_cache_dir(n_train: usize, n_test: usize, seed: u64) -> PathBuf {
    std::env::temp_dir().join(format!("splitnn-digits-{n_train}-{n_test}-{seed}"))
}

/// Loads (train, test) per the dataset spec.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset), HarnessError> {
    match spec {
        DatasetSpec::SyntheticGaussians {
            classes,
            dim,
            n,
            seed,
            spread,
            stddev,
        } => {
            let train =
                crate::data::synth::synth_dataset_with(*classes, *dim, *n, *seed, *spread, *stddev);
            let test = crate::data::synth::synth_dataset_with(
                *classes,
                *dim,
                (*n / 4).max(*classes * 4),
                seed ^ 0x7E57,
                *spread,
                *stddev,
            );
            Ok((train, test))
        }
        DatasetSpec::Mnist {
            path,
            train_subset,
            test_subset,
        } => {
            let dir = path
                .clone()
                .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| {
                    HarnessError::MnistUnavailable(format!(
                        "no path given and {MNIST_DIR_ENV} unset"
                    ))
                })?;
            Ok(crate::data::mnist::load_mnist(
                &dir,
                *train_subset,
                *test_subset,
            )?)
        }
        DatasetSpec::GeneratedDigits {
            n_train,
            n_test,
            seed,
        } => {
            let dir = digits_cache_dir(*n_train, *n_test, *seed);
            let marker = dir.join("t10k-labels-idx1-ubyte");
            if !marker.exists() {
                std::fs::create_dir_all(&dir)?;
                crate::data::digits::generate_digit_corpus(&dir, *n_train, *n_test, *seed)?;
            }
            Ok(crate::data::mnist::load_mnist(&dir, None, None)?)
        }
    }
}

/// The interleaved batch stream an experiment trains on: session turns in
/// global order, each turn one `(client, batches)` entry.
pub struct BuiltSchedule {
    pub turns: Vec<(String, Vec<Batch>)>,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

/// Builds the schedule per the config's policy. Round-robin visits clients
/// cyclically, one batch per turn; one epoch is one full pass over the
/// union of shards in that order.
pub fn build_schedule(
    cfg: &ExperimentConfig,
    train: &Dataset,
) -> Result<BuiltSchedule, HarnessError> {
    let shards = train.shard(cfg.agents, cfg.shard_policy);
    let per_shard: Vec<Vec<Batch>> = shards
        .iter()
        .map(|s| s.batches(cfg.batch_size))
        .collect();
    let client = |i: usize| format!("alice{}", i + 1);

    // One epoch of turns.
    let mut epoch_turns: Vec<(String, Vec<Batch>)> = Vec::new();
    match cfg.schedule {
        SchedulePolicy::Single => {
            let all: Vec<Batch> = per_shard.into_iter().flatten().collect();
            epoch_turns.push((client(0), all));
        }
        SchedulePolicy::RoundRobin => {
            let max_len = per_shard.iter().map(|b| b.len()).max().unwrap_or(0);
            for c in 0..max_len {
                for (i, batches) in per_shard.iter().enumerate() {
                    if let Some(b) = batches.get(c) {
                        epoch_turns.push((client(i), vec![b.clone()]));
                    }
                }
            }
        }
    }
    let steps_per_epoch: usize = epoch_turns.iter().map(|(_, b)| b.len()).sum();
    if steps_per_epoch == 0 {
        return Err(HarnessError::Data(DataError::Inconsistent(
            "empty training schedule".into(),
        )));
    }

    let (turns, total_steps) = match (cfg.epochs, cfg.steps) {
        (Some(e), _) => {
            let mut turns = Vec::with_capacity(epoch_turns.len() * e);
            for _ in 0..e {
                turns.extend(epoch_turns.iter().cloned());
            }
            (turns, steps_per_epoch * e)
        }
        (None, Some(s)) => {
            // Cycle through epochs, cutting turns to exactly `s` steps.
            let mut turns = Vec::new();
            let mut taken = 0usize;
            'outer: loop {
                for (id, batches) in &epoch_turns {
                    if taken >= s {
                        break 'outer;
                    }
                    let room = s - taken;
                    let chunk: Vec<Batch> = batches.iter().take(room).cloned().collect();
                    taken += chunk.len();
                    turns.push((id.clone(), chunk));
                }
            }
            (turns, s)
        }
        (None, None) => unreachable!("config validation requires steps or epochs"),
    };
    Ok(BuiltSchedule {
        turns,
        steps_per_epoch,
        total_steps,
    })
}

fn scenario_sync(sync: SyncSpec) -> ScenarioSync {
    match sync {
        SyncSpec::PeerToPeer => ScenarioSync::PeerToPeer,
        SyncSpec::CentralizedBob => ScenarioSync::CentralizedBob,
        SyncSpec::CentralizedServer => ScenarioSync::CentralizedServer { deltas: false },
        SyncSpec::CentralizedServerDeltas => ScenarioSync::CentralizedServer { deltas: true },
    }
}

fn training_mode(mode: ModeSpec) -> TrainingMode {
    match mode {
        ModeSpec::LabelSharing => TrainingMode::LabelSharing,
        ModeSpec::Wraparound => TrainingMode::Wraparound,
        ModeSpec::SemiSupervised { alpha } => TrainingMode::SemiSupervised { alpha },
    }
}

/// Builds the full scenario for a config (dataset loaded separately so
/// callers can reuse it).
pub fn build_scenario(
    cfg: &ExperimentConfig,
    train: &Dataset,
) -> Result<(Scenario, BuiltSchedule), HarnessError> {
    let schedule = build_schedule(cfg, train)?;
    let topology = cfg.build_topology()?;
    let mut scenario = Scenario::new(
        cfg.seed,
        topology,
        cfg.cuts.clone(),
        training_mode(cfg.mode),
        scenario_sync(cfg.sync),
        cfg.lr,
        schedule.turns.clone(),
    );
    scenario.faults = cfg.faults.clone();
    scenario.disconnects = cfg.disconnects.clone();
    scenario.cipher = CipherChoice::XorSha;
    Ok((scenario, schedule))
}

/// Global step-loss sequence of a run: server-side losses for label-sharing
/// modes, client-side (reassembled in turn order) for wraparound.
pub fn global_step_losses(out: &RunOutput, scenario: &Scenario) -> Vec<f64> {
    if !out.bob_losses.is_empty() {
        return out.bob_losses.clone();
    }
    let mut queues: std::collections::BTreeMap<&str, std::collections::VecDeque<f64>> = out
        .reports
        .iter()
        .map(|r| (r.client_id.as_str(), r.losses.iter().copied().collect()))
        .collect();
    let mut losses = Vec::new();
    for (id, batches) in &scenario.turns {
        if let Some(q) = queues.get_mut(id.as_str()) {
            for _ in 0..batches.len() {
                if let Some(l) = q.pop_front() {
                    losses.push(l);
                }
            }
        }
    }
    losses
}

/// Analytic client-side flops for one training step at the given batch size.
pub fn client_step_flops(scenario: &Scenario, batch: usize) -> u64 {
    let (template, _) = match scenario.build_segments() {
        Ok(x) => x,
        Err(_) => return 0,
    };
    let alice = template.instantiate("probe");
    let input_dim = scenario.topology.input_dim().unwrap_or(0);
    match alice.segments() {
        AliceSegments::Head(s) => segment_flops(s.layers(), input_dim, batch, Pass::ForwardBackward),
        AliceSegments::Autoencoder { encoder, decoder } => {
            let enc = segment_flops(encoder.layers(), input_dim, batch, Pass::ForwardBackward);
            let enc_out = encoder
                .layers()
                .iter()
                .fold(input_dim, |d, l| l.out_dim(l.in_dim().unwrap_or(d)));
            let dec = segment_flops(decoder.layers(), enc_out, batch, Pass::ForwardBackward);
            enc + dec
        }
        AliceSegments::Wraparound { head, tail } => {
            let h = segment_flops(head.layers(), input_dim, batch, Pass::ForwardBackward);
            // Tail input width equals the middle segment's output; walking
            // the whole prefix tracks it.
            let mut width = input_dim;
            for l in scenario
                .topology
                .layers()
                .iter()
                .take(scenario.topology.layers().len() - tail.layers().len())
            {
                width = l.out_dim(l.in_dim().unwrap_or(width));
            }
            h + segment_flops(tail.layers(), width, batch, Pass::ForwardBackward)
        }
    }
}

/// Runs one experiment to a deterministic result record. Returns the raw
/// transport output alongside for callers that inspect logs.
pub fn run_experiment_full(
    cfg: &ExperimentConfig,
) -> Result<(ResultRecord, RunOutput, Scenario), HarnessError> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.dataset)?;
    let (scenario, schedule) = build_scenario(cfg, &train)?;

    let out = match cfg.transport {
        TransportChoice::Sim => deterministic_run(&scenario)?,
        TransportChoice::Tcp => run_scenario_tcp(&scenario, Arc::new(PlainChannel))?,
    };

    let step_losses = global_step_losses(&out, &scenario);
    let per_epoch_train_loss: Vec<f64> = step_losses
        .chunks(schedule.steps_per_epoch)
        .map(|chunk| chunk.iter().sum::<f64>() / chunk.len().max(1) as f64)
        .collect();

    let mut final_net = SegmentNet::from_layers(out.final_layers.clone());
    let final_test_accuracy = accuracy(&mut final_net, &test)?;

    let flops_per_step = client_step_flops(&scenario, cfg.batch_size);
    let mut ledger = CostLedger::new();
    for report in &out.reports {
        // Committed steps: batches of turns this client completed.
        let scheduled: Vec<usize> = scenario
            .turns
            .iter()
            .filter(|(id, _)| id == &report.client_id)
            .map(|(_, b)| b.len())
            .collect();
        let steps: usize = report
            .turns
            .iter()
            .zip(&scheduled)
            .filter(|(outcome, _)| **outcome == crate::transport::TurnOutcome::Completed)
            .map(|(_, n)| *n)
            .sum();
        ledger.charge_flops(&report.client_id, flops_per_step * steps as u64);
        ledger.charge_up(&report.client_id, report.bytes_up);
        ledger.charge_down(&report.client_id, report.bytes_down);
    }

    let record = ResultRecord {
        experiment_id: cfg.experiment_id.clone(),
        config_hash: cfg.config_hash(),
        per_epoch_train_loss,
        final_test_accuracy,
        final_weight_digest: out.combined_digest(),
        client_costs: ledger
            .clients()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        step_losses,
    };
    Ok((record, out, scenario))
}

/// Runs one experiment to a deterministic result record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord, HarnessError> {
    run_experiment_full(cfg).map(|(r, _, _)| r)
}
