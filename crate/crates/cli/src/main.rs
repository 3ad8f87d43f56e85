//! `splitnn` — experiment harness and node launcher for split
//! neural-network training.
//!
//! Verbs: `train` (run one experiment), `compare` (split vs federated
//! averaging vs large-batch SGD), `verify` (equivalence and property
//! suites), `serve-bob` / `serve-alice` / `serve-weights` (real-transport
//! nodes), `generate-digits` (stand-in corpus).

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splitnn_core::baselines::{
    compare, fedavg_train, large_batch_sgd_train, topology_fingerprint, FedAvgConfig,
    LargeBatchSgdConfig, Provenance, RunSummary,
};
use splitnn_core::harness::{
    build_scenario, client_step_flops, emit_record, emit_report, load_dataset, run_experiment_full,
    run_quick_suite, ExperimentConfig,
};
use splitnn_core::nn::{initialize, Initializer};
use splitnn_core::protocol::session::{ClientRegistry, SessionState, StoreMode};
use splitnn_core::protocol::XorShaStreamCipher;
use splitnn_core::transport::tcp::{drive_turn, serve, Dialer, PlainChannel, Shared};
use splitnn_core::transport::{AliceNode, BobNode, MessageLog, SyncConfig, WeightServerNode};

#[derive(Parser)]
#[command(name = "splitnn", version, about = "split neural-network training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that mirror config-file directives; each appends a line that
/// overrides the file.
#[derive(Args, Default, Clone)]
struct ConfigOverrides {
    /// Experiment config file (declarative text format).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment_id: Option<String>,
    /// Dataset directive, e.g. "synthetic classes=3 dim=6 n=960 seed=7".
    #[arg(long)]
    dataset: Option<String>,
    /// Topology directive, e.g. "fc 784 128 relu fc 128 10 softmax-head".
    #[arg(long)]
    topology: Option<String>,
    /// Cut indices, e.g. "1" or "1 3".
    #[arg(long)]
    cuts: Option<String>,
    #[arg(long)]
    agents: Option<usize>,
    /// "round-robin" or "single".
    #[arg(long)]
    schedule: Option<String>,
    /// "label-sharing", "wraparound", or "semi-supervised alpha=0.1".
    #[arg(long)]
    mode: Option<String>,
    /// "p2p", "centralized", "centralized-server", "centralized-server-deltas".
    #[arg(long)]
    sync: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// "sim" or "tcp".
    #[arg(long)]
    transport: Option<String>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => String::new(),
        };
        let mut push = |line: String| {
            text.push_str(&line);
            text.push('\n');
        };
        if let Some(v) = &self.experiment_id {
            push(format!("experiment {v}"));
        }
        if let Some(v) = &self.dataset {
            push(format!("dataset {v}"));
        }
        if let Some(v) = &self.topology {
            push(format!("topology {v}"));
        }
        if let Some(v) = &self.cuts {
            push(format!("cuts {v}"));
        }
        if let Some(v) = self.agents {
            push(format!("agents {v}"));
        }
        if let Some(v) = &self.schedule {
            push(format!("schedule {v}"));
        }
        if let Some(v) = &self.mode {
            push(format!("mode {v}"));
        }
        if let Some(v) = &self.sync {
            push(format!("sync {v}"));
        }
        if let Some(v) = self.lr {
            push(format!("lr {v}"));
        }
        if let Some(v) = self.batch_size {
            push(format!("batch-size {v}"));
        }
        if let Some(v) = self.epochs {
            push(format!("epochs {v}"));
        }
        if let Some(v) = self.steps {
            push(format!("steps {v}"));
        }
        if let Some(v) = self.seed {
            push(format!("seed {v}"));
        }
        if let Some(v) = &self.transport {
            push(format!("transport {v}"));
        }
        Ok(ExperimentConfig::parse(&text)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config to a deterministic result record.
    Train {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Directory for result/series/config-echo artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split training vs federated averaging vs large-batch SGD on one
    /// topology and dataset.
    Compare {
        #[command(flatten)]
        overrides: ConfigOverrides,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Baseline communication rounds.
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        /// Local epochs per federated-averaging round.
        #[arg(long, default_value_t = 1)]
        local_epochs: usize,
        /// Client fraction per federated-averaging round.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Run the equivalence and protocol property suites.
    Verify,
    /// Serve the compute side over TCP.
    ServeBob {
        #[command(flatten)]
        overrides: ConfigOverrides,
        #[arg(long)]
        listen: String,
        /// Registry file: one "client_id secret address" entry per line.
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, default_value = "pre-shared-key")]
        psk: String,
    },
    /// Run one data client's session turns against a remote Bob.
    ServeAlice {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// This client's identity (must appear in the registry).
        #[arg(long)]
        id: String,
        /// Which shard of the dataset this client holds (0-based).
        #[arg(long, default_value_t = 0)]
        shard_index: usize,
        /// Bob's address, host:port.
        #[arg(long)]
        bob: String,
        /// Weight server address, host:port (centralized-server sync).
        #[arg(long)]
        weights: Option<String>,
        /// Listen address for serving peer weight requests (p2p sync).
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, default_value = "pre-shared-key")]
        psk: String,
    },
    /// Serve a centralized weight store over TCP.
    ServeWeights {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        registry: PathBuf,
        /// Store cumulative weight deltas instead of full weight files.
        #[arg(long)]
        deltas: bool,
    },
    /// Write a procedural digit corpus in the four-file IDX layout.
    GenerateDigits {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 12000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_registry(path: &PathBuf) -> Result<ClientRegistry> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading registry {}", path.display()))?;
    let mut registry = ClientRegistry::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (id, secret) = match (parts.next(), parts.next()) {
            (Some(i), Some(s)) => (i, s),
            _ => bail!("registry line {}: need `id secret [address]`", lineno + 1),
        };
        let address = parts.next().unwrap_or(id);
        registry.register(id, secret, address);
    }
    Ok(registry)
}

fn registry_book(registry: &ClientRegistry) -> BTreeMap<String, String> {
    registry
        .ids()
        .filter_map(|id| {
            registry
                .lookup(id)
                .map(|r| (id.to_string(), r.address.clone()))
        })
        .collect()
}

fn cmd_train(overrides: ConfigOverrides, out: Option<PathBuf>) -> Result<()> {
    let cfg = overrides.resolve()?;
    let started = Instant::now();
    let (record, run_out, _) = run_experiment_full(&cfg)?;
    println!("experiment       {}", record.experiment_id);
    println!("config hash      {}", record.config_hash);
    println!("steps            {}", record.step_losses.len());
    for (i, loss) in record.per_epoch_train_loss.iter().enumerate() {
        println!("epoch {:>3} loss   {loss:.6}", i + 1);
    }
    println!("test accuracy    {:.4}", record.final_test_accuracy);
    println!("weight digest    {}", record.final_weight_digest);
    for (client, costs) in &record.client_costs {
        println!(
            "{client:<12} flops {:>14}  up {:>10} B  down {:>10} B",
            costs.flops, costs.bytes_up, costs.bytes_down
        );
    }
    println!("messages         {}", run_out.log.entries().len());
    println!("elapsed          {:.2?}", started.elapsed());
    if let Some(dir) = out {
        let written = emit_record(&dir, &cfg, &record)?;
        let log_path = dir.join(format!("{}_messages.csv", record.experiment_id));
        std::fs::write(&log_path, run_out.log.to_csv())?;
        for p in written.iter().chain([&log_path]) {
            println!("wrote            {}", p.display());
        }
    }
    Ok(())
}

fn cmd_compare(
    overrides: ConfigOverrides,
    out: Option<PathBuf>,
    rounds: usize,
    local_epochs: usize,
    fraction: f64,
) -> Result<()> {
    let cfg = overrides.resolve()?;
    let (record, run_out, scenario) = run_experiment_full(&cfg)?;
    let topology = cfg.build_topology()?;
    let fingerprint = topology_fingerprint(&topology);

    // Split row: flops analytic, bytes measured from the message log.
    let turns_per_client = (scenario.turns.len() / cfg.agents).max(1);
    let mean_bytes: u64 = record
        .client_costs
        .iter()
        .map(|(_, c)| (c.bytes_up + c.bytes_down) / turns_per_client as u64)
        .sum::<u64>()
        / record.client_costs.len().max(1) as u64;
    let split_row = RunSummary {
        method: "split".into(),
        clients: cfg.agents,
        cut: cfg.cuts.first().copied(),
        client_flops_per_step: (
            client_step_flops(&scenario, cfg.batch_size),
            Provenance::Analytic,
        ),
        client_bytes_per_round: (mean_bytes, Provenance::Measured),
        final_accuracy: (record.final_test_accuracy, Provenance::Measured),
        topology_fingerprint: fingerprint.clone(),
    };

    // Baselines on the same seeded topology and shards.
    let (train, test) = load_dataset(&cfg.dataset)?;
    let shards = train.shard(cfg.agents, cfg.shard_policy);
    let net = initialize(&topology, Initializer::xavier(cfg.seed));

    let fed = fedavg_train(
        &net,
        &shards,
        &test,
        &FedAvgConfig {
            local_epochs,
            client_fraction: fraction,
            lr: cfg.lr,
            rounds,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        },
    )?;
    let fed_costs = fed.ledger.mean_costs();
    let fed_row = RunSummary {
        method: "fedavg".into(),
        clients: cfg.agents,
        cut: None,
        client_flops_per_step: (fed_costs.flops / rounds as u64, Provenance::Analytic),
        client_bytes_per_round: (
            (fed_costs.bytes_up + fed_costs.bytes_down) / rounds as u64,
            Provenance::Measured,
        ),
        final_accuracy: (
            fed.accuracy_trace.last().copied().unwrap_or(0.0),
            Provenance::Measured,
        ),
        topology_fingerprint: fingerprint.clone(),
    };

    let sgd = large_batch_sgd_train(
        &net,
        &shards,
        &test,
        &LargeBatchSgdConfig {
            lr: cfg.lr,
            rounds,
            batch_size: cfg.batch_size,
        },
    )?;
    let sgd_costs = sgd.ledger.mean_costs();
    let sgd_row = RunSummary {
        method: "large-batch-sgd".into(),
        clients: cfg.agents,
        cut: None,
        client_flops_per_step: (sgd_costs.flops / rounds as u64, Provenance::Analytic),
        client_bytes_per_round: (
            (sgd_costs.bytes_up + sgd_costs.bytes_down) / rounds as u64,
            Provenance::Measured,
        ),
        final_accuracy: (
            sgd.accuracy_trace.last().copied().unwrap_or(0.0),
            Provenance::Measured,
        ),
        topology_fingerprint: fingerprint,
    };

    let table = compare(vec![split_row, fed_row, sgd_row])?;
    print!("{}", table.to_csv());
    print!("{}", table.provenance_notes());
    let _ = run_out;
    if let Some(dir) = out {
        let written = emit_report(&dir, &[(cfg, record)], Some(&table))?;
        for p in written {
            println!("wrote            {}", p.display());
        }
    }
    Ok(())
}

fn cmd_verify() -> Result<()> {
    let outcomes = run_quick_suite();
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "[{}] {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} verification checks failed");
    }
    Ok(())
}

fn shared(stop: Arc<AtomicBool>) -> Shared {
    Shared {
        log: Arc::new(Mutex::new(MessageLog::new())),
        epoch: Instant::now(),
        stop,
    }
}

fn cmd_serve_bob(
    overrides: ConfigOverrides,
    listen: String,
    registry_path: PathBuf,
    _psk: String,
) -> Result<()> {
    let cfg = overrides.resolve()?;
    let registry = load_registry(&registry_path)?;
    let dummy_turns = vec![("alice1".to_string(), vec![])];
    let (scenario, _) = {
        let (train, _) = load_dataset(&cfg.dataset)?;
        let mut built = build_scenario(&cfg, &train)?;
        built.0.turns = dummy_turns;
        built
    };
    let (template, bob_segment) = scenario.build_segments()?;
    let expected = template.instantiate("probe").weight_digest();
    let store_mode = match cfg.sync {
        splitnn_core::harness::SyncSpec::CentralizedBob => StoreMode::Centralized,
        _ => StoreMode::PeerToPeer,
    };
    let session = SessionState::new(registry.clone(), expected, store_mode, cfg.seed ^ 0xB0B);
    let bob = Arc::new(Mutex::new(BobNode::new(
        "bob",
        session,
        bob_segment,
        scenario.mode,
        cfg.lr,
    )));

    let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
    println!("serving bob on {}", listener.local_addr()?);
    let stop = Arc::new(AtomicBool::new(false));
    let ctx = shared(stop.clone());
    let epoch = ctx.epoch;

    // Timeout ticker so idle sessions expire without traffic.
    {
        let bob = bob.clone();
        let stop = stop.clone();
        std::thread::spawn(move || {
            while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                std::thread::sleep(std::time::Duration::from_secs(1));
                bob.lock().unwrap().on_tick(epoch.elapsed());
            }
        });
    }

    let bob2 = bob.clone();
    let bob3 = bob.clone();
    let handle = serve(
        listener,
        "bob".into(),
        registry,
        Arc::new(PlainChannel),
        Box::new(move |from, msg, now| bob2.lock().unwrap().handle_frame(from, msg, now)),
        Box::new(move |peer, now| bob3.lock().unwrap().on_peer_disconnect(peer, now)),
        ctx,
    );
    handle.join().ok();
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_serve_alice(
    overrides: ConfigOverrides,
    id: String,
    shard_index: usize,
    bob: String,
    weights: Option<String>,
    listen: Option<String>,
    registry_path: PathBuf,
    psk: String,
) -> Result<()> {
    let cfg = overrides.resolve()?;
    let registry = load_registry(&registry_path)?;
    let secret = registry
        .lookup(&id)
        .map(|r| r.secret.clone())
        .context("this client id is not in the registry")?;
    if shard_index >= cfg.agents {
        bail!("shard index {shard_index} out of range for {} agents", cfg.agents);
    }

    let (train, _) = load_dataset(&cfg.dataset)?;
    let (scenario, _) = build_scenario(&cfg, &train)?;
    let (template, _) = scenario.build_segments()?;
    let engine = template.instantiate(&id);

    // This process plays the shard_index-th client of the schedule.
    let scheduled = format!("alice{}", shard_index + 1);
    let my_turns: Vec<Vec<splitnn_core::nn::Batch>> = scenario
        .turns
        .iter()
        .filter(|(cid, _)| *cid == scheduled)
        .map(|(_, b)| b.clone())
        .collect();
    println!("{id}: {} session turns", my_turns.len());

    let sync = match cfg.sync {
        splitnn_core::harness::SyncSpec::PeerToPeer => SyncConfig::PeerToPeer,
        splitnn_core::harness::SyncSpec::CentralizedBob => SyncConfig::Centralized {
            store: "bob".into(),
            deltas: false,
        },
        splitnn_core::harness::SyncSpec::CentralizedServer => SyncConfig::Centralized {
            store: "weights".into(),
            deltas: false,
        },
        splitnn_core::harness::SyncSpec::CentralizedServerDeltas => SyncConfig::Centralized {
            store: "weights".into(),
            deltas: true,
        },
    };

    let alice = Arc::new(Mutex::new(AliceNode::new(
        &id,
        &secret,
        "bob",
        scenario.mode,
        sync,
        cfg.lr,
        engine,
        my_turns,
        Arc::new(XorShaStreamCipher),
        psk.into_bytes(),
    )));

    let mut book = registry_book(&registry);
    book.insert("bob".into(), bob);
    if let Some(w) = weights {
        book.insert("weights".into(), w);
    }

    let stop = Arc::new(AtomicBool::new(false));
    let ctx = shared(stop.clone());
    let epoch = ctx.epoch;
    let log = ctx.log.clone();

    // Peer-to-peer weight serving.
    let mut listener_handle = None;
    if let Some(addr) = listen {
        let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
        println!("serving peer weight requests on {}", listener.local_addr()?);
        let holder = alice.clone();
        listener_handle = Some(serve(
            listener,
            id.clone(),
            registry,
            Arc::new(PlainChannel),
            Box::new(move |from, msg, _now| {
                let mut a = holder.lock().unwrap();
                a.note_received(msg.to_frame().len());
                let reply = a.handle_peer_request(from, &msg);
                a.note_sent(reply.to_frame().len());
                Ok(reply)
            }),
            Box::new(|_, _| {}),
            ctx,
        ));
    }

    let mut dialer = Dialer::new(&id, &secret, book, Arc::new(PlainChannel));
    while !alice.lock().unwrap().is_finished() {
        drive_turn(&alice, &mut dialer, &log, epoch)
            .map_err(|e| anyhow::anyhow!("session turn failed: {e}"))?;
    }
    let report = alice.lock().unwrap().report();
    println!(
        "{}: {} turns completed, {} aborted, {} B up, {} B down",
        report.client_id,
        report.completed_turns(),
        report.aborted_turns(),
        report.bytes_up,
        report.bytes_down
    );
    println!("final weight digest {}", report.final_digest);
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    if let Some(h) = listener_handle {
        h.join().ok();
    }
    Ok(())
}

fn cmd_serve_weights(listen: String, registry_path: PathBuf, deltas: bool) -> Result<()> {
    let registry = load_registry(&registry_path)?;
    let server = Arc::new(Mutex::new(WeightServerNode::new(
        "weights",
        registry.clone(),
        deltas,
    )));
    let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
    println!("serving weight store on {}", listener.local_addr()?);
    let stop = Arc::new(AtomicBool::new(false));
    let ctx = shared(stop);
    let handle = serve(
        listener,
        "weights".into(),
        registry,
        Arc::new(PlainChannel),
        Box::new(move |from, msg, _now| server.lock().unwrap().handle_frame(from, msg)),
        Box::new(|_, _| {}),
        ctx,
    );
    handle.join().ok();
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { overrides, out } => cmd_train(overrides, out),
        Command::Compare {
            overrides,
            out,
            rounds,
            local_epochs,
            fraction,
        } => cmd_compare(overrides, out, rounds, local_epochs, fraction),
        Command::Verify => cmd_verify(),
        Command::ServeBob {
            overrides,
            listen,
            registry,
            psk,
        } => cmd_serve_bob(overrides, listen, registry, psk),
        Command::ServeAlice {
            overrides,
            id,
            shard_index,
            bob,
            weights,
            listen,
            registry,
            psk,
        } => cmd_serve_alice(overrides, id, shard_index, bob, weights, listen, registry, psk),
        Command::ServeWeights {
            listen,
            registry,
            deltas,
        } => cmd_serve_weights(listen, registry, deltas),
        Command::GenerateDigits {
            dir,
            train,
            test,
            seed,
        } => {
            std::fs::create_dir_all(&dir)?;
            splitnn_core::data::digits::generate_digit_corpus(&dir, train, test, seed)?;
            println!(
                "wrote {train} train / {test} test digit images to {}",
                dir.display()
            );
            Ok(())
        }
    }
}
