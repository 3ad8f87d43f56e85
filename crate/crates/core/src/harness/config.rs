//! Experiment configuration: a declarative text format covering dataset,
//! topology, split, schedule, transport, and fault directives. A config
//! fully determines a run; its canonical echo is hashed into the result
//! record.
//!
//! ```text
//! experiment equivalence-check
//! dataset synthetic classes=3 dim=6 n=960 seed=7
//! topology fc 6 8 relu fc 8 5 relu fc 5 3 softmax-head
//! cuts 1
//! agents 2
//! schedule round-robin
//! mode label-sharing
//! sync p2p
//! lr 0.1
//! batch-size 4
//! epochs 1
//! seed 42
//! shard contiguous
//! transport sim
//! fault drop from=alice1 to=bob nth=2
//! disconnect node=alice1 after-sends=2
//! ```

use std::path::PathBuf;

use thiserror::Error;

use crate::data::ShardPolicy;
use crate::nn::{LayerSpec, NetError, NetworkTopology};
use crate::tensor::checksum;
use crate::transport::sim::{DisconnectRule, FaultKind, FaultRule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: {1}")]
    Parse(usize, String),
    #[error("missing required field {0:?}")]
    Missing(&'static str),
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    SyntheticGaussians {
        classes: usize,
        dim: usize,
        n: usize,
        seed: u64,
        spread: f64,
        stddev: f64,
    },
    /// IDX files on disk (explicit path, or the SPLITNN_MNIST_DIR
    /// environment variable at load time).
    Mnist {
        path: Option<PathBuf>,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
    /// Self-generated procedural digit corpus (MNIST stand-in).
    GeneratedDigits {
        n_train: usize,
        n_test: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePolicy {
    RoundRobin,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModeSpec {
    LabelSharing,
    Wraparound,
    SemiSupervised { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncSpec {
    PeerToPeer,
    CentralizedBob,
    CentralizedServer,
    CentralizedServerDeltas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportChoice {
    Sim,
    Tcp,
}

/// A layer in the textual topology grammar.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Fc { input: usize, output: usize, bias: bool },
    Relu,
    Sigmoid,
    SoftmaxHead,
    MseHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub dataset: DatasetSpec,
    pub layers: Vec<LayerDesc>,
    pub cuts: Vec<usize>,
    pub agents: usize,
    pub schedule: SchedulePolicy,
    pub mode: ModeSpec,
    pub sync: SyncSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: u64,
    pub shard_policy: ShardPolicy,
    pub transport: TransportChoice,
    pub faults: Vec<FaultRule>,
    pub disconnects: Vec<DisconnectRule>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: "experiment".into(),
            dataset: DatasetSpec::SyntheticGaussians {
                classes: 2,
                dim: 8,
                n: 256,
                seed: 7,
                spread: 3.0,
                stddev: 1.0,
            },
            layers: vec![
                LayerDesc::Fc { input: 8, output: 16, bias: true },
                LayerDesc::Relu,
                LayerDesc::Fc { input: 16, output: 2, bias: true },
                LayerDesc::SoftmaxHead,
            ],
            cuts: vec![1],
            agents: 1,
            schedule: SchedulePolicy::Single,
            mode: ModeSpec::LabelSharing,
            sync: SyncSpec::PeerToPeer,
            lr: 0.1,
            batch_size: 32,
            steps: None,
            epochs: Some(1),
            seed: 42,
            shard_policy: ShardPolicy::Contiguous,
            transport: TransportChoice::Sim,
            faults: Vec::new(),
            disconnects: Vec::new(),
        }
    }
}

fn kv(token: &str) -> Option<(&str, &str)> {
    token.split_once('=')
}

fn parse_kv<T: std::str::FromStr>(
    tokens: &[&str],
    key: &str,
    line: usize,
) -> Result<Option<T>, ConfigError> {
    for t in tokens {
        if let Some((k, v)) = kv(t) {
            if k == key {
                return v
                    .parse::<T>()
                    .map(Some)
                    .map_err(|_| ConfigError::Parse(line, format!("bad value for {key}: {v}")));
            }
        }
    }
    Ok(None)
}

fn parse_topology(tokens: &[&str], line: usize) -> Result<Vec<LayerDesc>, ConfigError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i] {
            "fc" => {
                let input: usize = tokens
                    .get(i + 1)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| ConfigError::Parse(line, "fc needs input dim".into()))?;
                let output: usize = tokens
                    .get(i + 2)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| ConfigError::Parse(line, "fc needs output dim".into()))?;
                let bias = tokens.get(i + 3) != Some(&"nobias");
                out.push(LayerDesc::Fc { input, output, bias });
                i += if bias { 3 } else { 4 };
            }
            "relu" => {
                out.push(LayerDesc::Relu);
                i += 1;
            }
            "sigmoid" => {
                out.push(LayerDesc::Sigmoid);
                i += 1;
            }
            "softmax-head" => {
                out.push(LayerDesc::SoftmaxHead);
                i += 1;
            }
            "mse-head" => {
                out.push(LayerDesc::MseHead);
                i += 1;
            }
            other => {
                return Err(ConfigError::Parse(line, format!("unknown layer {other}")));
            }
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut saw_topology = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let rest = &tokens[1..];
            match tokens[0] {
                "experiment" => {
                    cfg.experiment_id = rest
                        .first()
                        .ok_or_else(|| ConfigError::Parse(line, "experiment needs a name".into()))?
                        .to_string();
                }
                "dataset" => {
                    let kind = *rest
                        .first()
                        .ok_or_else(|| ConfigError::Parse(line, "dataset needs a kind".into()))?;
                    cfg.dataset = match kind {
                        "synthetic" => DatasetSpec::SyntheticGaussians {
                            classes: parse_kv(rest, "classes", line)?
                                .ok_or(ConfigError::Missing("classes"))?,
                            dim: parse_kv(rest, "dim", line)?.ok_or(ConfigError::Missing("dim"))?,
                            n: parse_kv(rest, "n", line)?.ok_or(ConfigError::Missing("n"))?,
                            seed: parse_kv(rest, "seed", line)?.unwrap_or(7),
                            spread: parse_kv(rest, "spread", line)?.unwrap_or(3.0),
                            stddev: parse_kv(rest, "stddev", line)?.unwrap_or(1.0),
                        },
                        "mnist" => DatasetSpec::Mnist {
                            path: parse_kv::<String>(rest, "path", line)?.map(PathBuf::from),
                            train_subset: parse_kv(rest, "subset", line)?,
                            test_subset: parse_kv(rest, "test-subset", line)?,
                        },
                        "digits" => DatasetSpec::GeneratedDigits {
                            n_train: parse_kv(rest, "n-train", line)?
                                .ok_or(ConfigError::Missing("n-train"))?,
                            n_test: parse_kv(rest, "n-test", line)?
                                .ok_or(ConfigError::Missing("n-test"))?,
                            seed: parse_kv(rest, "seed", line)?.unwrap_or(42),
                        },
                        other => {
                            return Err(ConfigError::Parse(
                                line,
                                format!("unknown dataset kind {other}"),
                            ))
                        }
                    };
                }
                "topology" => {
                    cfg.layers = parse_topology(rest, line)?;
                    saw_topology = true;
                }
                "cuts" | "cut" => {
                    cfg.cuts = rest
                        .iter()
                        .map(|t| {
                            t.parse()
                                .map_err(|_| ConfigError::Parse(line, format!("bad cut {t}")))
                        })
                        .collect::<Result<_, _>>()?;
                }
                "agents" => {
                    cfg.agents = rest
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| ConfigError::Parse(line, "agents needs a count".into()))?;
                }
                "schedule" => {
                    cfg.schedule = match rest.first().copied() {
                        Some("round-robin") => SchedulePolicy::RoundRobin,
                        Some("single") => SchedulePolicy::Single,
                        other => {
                            return Err(ConfigError::Parse(
                                line,
                                format!("unknown schedule {other:?}"),
                            ))
                        }
                    };
                }
                "mode" => {
                    cfg.mode = match rest.first().copied() {
                        Some("label-sharing") => ModeSpec::LabelSharing,
                        Some("wraparound") => ModeSpec::Wraparound,
                        Some("semi-supervised") => ModeSpec::SemiSupervised {
                            alpha: parse_kv(rest, "alpha", line)?.unwrap_or(0.1),
                        },
                        other => {
                            return Err(ConfigError::Parse(line, format!("unknown mode {other:?}")))
                        }
                    };
                }
                "sync" => {
                    cfg.sync = match rest.first().copied() {
                        Some("p2p") => SyncSpec::PeerToPeer,
                        Some("centralized") => SyncSpec::CentralizedBob,
                        Some("centralized-server") => SyncSpec::CentralizedServer,
                        Some("centralized-server-deltas") => SyncSpec::CentralizedServerDeltas,
                        other => {
                            return Err(ConfigError::Parse(line, format!("unknown sync {other:?}")))
                        }
                    };
                }
                "lr" => {
                    cfg.lr = rest
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| ConfigError::Parse(line, "lr needs a value".into()))?;
                }
                "batch-size" => {
                    cfg.batch_size = rest
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| ConfigError::Parse(line, "batch-size needs a value".into()))?;
                }
                "steps" => {
                    cfg.steps = Some(rest.first().and_then(|t| t.parse().ok()).ok_or_else(
                        || ConfigError::Parse(line, "steps needs a value".into()),
                    )?);
                    cfg.epochs = None;
                }
                "epochs" => {
                    cfg.epochs = Some(rest.first().and_then(|t| t.parse().ok()).ok_or_else(
                        || ConfigError::Parse(line, "epochs needs a value".into()),
                    )?);
                    cfg.steps = None;
                }
                "seed" => {
                    cfg.seed = rest
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| ConfigError::Parse(line, "seed needs a value".into()))?;
                }
                "shard" => {
                    cfg.shard_policy = match rest.first().copied() {
                        Some("contiguous") => ShardPolicy::Contiguous,
                        Some("shuffled") => {
                            ShardPolicy::SeededShuffle(parse_kv(rest, "seed", line)?.unwrap_or(0))
                        }
                        other => {
                            return Err(ConfigError::Parse(
                                line,
                                format!("unknown shard policy {other:?}"),
                            ))
                        }
                    };
                }
                "transport" => {
                    cfg.transport = match rest.first().copied() {
                        Some("sim") => TransportChoice::Sim,
                        Some("tcp") => TransportChoice::Tcp,
                        other => {
                            return Err(ConfigError::Parse(
                                line,
                                format!("unknown transport {other:?}"),
                            ))
                        }
                    };
                }
                "fault" => {
                    let kind = match rest.first().copied() {
                        Some("drop") => FaultKind::Drop,
                        Some("corrupt") => FaultKind::Corrupt {
                            byte: parse_kv(rest, "byte", line)?.unwrap_or(0),
                        },
                        Some("delay") => FaultKind::Delay,
                        other => {
                            return Err(ConfigError::Parse(
                                line,
                                format!("unknown fault kind {other:?}"),
                            ))
                        }
                    };
                    cfg.faults.push(FaultRule {
                        from: parse_kv::<String>(rest, "from", line)?
                            .ok_or(ConfigError::Missing("from"))?,
                        to: parse_kv::<String>(rest, "to", line)?
                            .ok_or(ConfigError::Missing("to"))?,
                        nth: parse_kv(rest, "nth", line)?.ok_or(ConfigError::Missing("nth"))?,
                        kind,
                    });
                }
                "disconnect" => {
                    cfg.disconnects.push(DisconnectRule {
                        node: parse_kv::<String>(rest, "node", line)?
                            .ok_or(ConfigError::Missing("node"))?,
                        after_sends: parse_kv(rest, "after-sends", line)?
                            .ok_or(ConfigError::Missing("after-sends"))?,
                    });
                }
                other => {
                    return Err(ConfigError::Parse(line, format!("unknown directive {other}")));
                }
            }
        }
        if !saw_topology {
            return Err(ConfigError::Missing("topology"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.agents == 0 {
            return Err(ConfigError::Inconsistent("agents must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Inconsistent("batch size must be >= 1".into()));
        }
        if self.steps.is_none() && self.epochs.is_none() {
            return Err(ConfigError::Inconsistent(
                "either steps or epochs must be set".into(),
            ));
        }
        match self.mode {
            ModeSpec::LabelSharing => {
                if self.cuts.len() != 1 {
                    return Err(ConfigError::Inconsistent(
                        "label-sharing needs exactly one cut".into(),
                    ));
                }
            }
            ModeSpec::Wraparound => {
                if self.cuts.len() != 2 {
                    return Err(ConfigError::Inconsistent(
                        "wraparound needs exactly two cuts".into(),
                    ));
                }
            }
            ModeSpec::SemiSupervised { alpha } => {
                if self.cuts.len() != 2 {
                    return Err(ConfigError::Inconsistent(
                        "semi-supervised needs encoder and decoder cuts".into(),
                    ));
                }
                if !(0.0..=100.0).contains(&alpha) {
                    return Err(ConfigError::Inconsistent("alpha out of range".into()));
                }
            }
        }
        if self.schedule == SchedulePolicy::Single && self.agents != 1 {
            return Err(ConfigError::Inconsistent(
                "single schedule requires exactly one agent".into(),
            ));
        }
        if matches!(self.sync, SyncSpec::CentralizedServerDeltas)
            && matches!(self.mode, ModeSpec::SemiSupervised { .. })
        {
            // Delta refresh presumes identical boot weights per segment
            // arrangement; supported, nothing extra to check.
        }
        if self.transport == TransportChoice::Tcp
            && (!self.faults.is_empty() || !self.disconnects.is_empty())
        {
            return Err(ConfigError::Inconsistent(
                "fault injection requires the sim transport".into(),
            ));
        }
        Ok(())
    }

    /// Canonical echo: parsing it reproduces this config; its bytes feed the
    /// config hash. Dataset paths are environment-dependent and excluded.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("experiment {}\n", self.experiment_id));
        match &self.dataset {
            DatasetSpec::SyntheticGaussians {
                classes,
                dim,
                n,
                seed,
                spread,
                stddev,
            } => out.push_str(&format!(
                "dataset synthetic classes={classes} dim={dim} n={n} seed={seed} spread={spread} stddev={stddev}\n"
            )),
            DatasetSpec::Mnist {
                train_subset,
                test_subset,
                ..
            } => {
                out.push_str("dataset mnist");
                if let Some(s) = train_subset {
                    out.push_str(&format!(" subset={s}"));
                }
                if let Some(s) = test_subset {
                    out.push_str(&format!(" test-subset={s}"));
                }
                out.push('\n');
            }
            DatasetSpec::GeneratedDigits {
                n_train,
                n_test,
                seed,
            } => out.push_str(&format!(
                "dataset digits n-train={n_train} n-test={n_test} seed={seed}\n"
            )),
        }
        out.push_str("topology");
        for l in &self.layers {
            match l {
                LayerDesc::Fc { input, output, bias } => {
                    out.push_str(&format!(" fc {input} {output}"));
                    if !bias {
                        out.push_str(" nobias");
                    }
                }
                LayerDesc::Relu => out.push_str(" relu"),
                LayerDesc::Sigmoid => out.push_str(" sigmoid"),
                LayerDesc::SoftmaxHead => out.push_str(" softmax-head"),
                LayerDesc::MseHead => out.push_str(" mse-head"),
            }
        }
        out.push('\n');
        out.push_str(&format!(
            "cuts {}\n",
            self.cuts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
        out.push_str(&format!("agents {}\n", self.agents));
        out.push_str(&format!(
            "schedule {}\n",
            match self.schedule {
                SchedulePolicy::RoundRobin => "round-robin",
                SchedulePolicy::Single => "single",
            }
        ));
        match self.mode {
            ModeSpec::LabelSharing => out.push_str("mode label-sharing\n"),
            ModeSpec::Wraparound => out.push_str("mode wraparound\n"),
            ModeSpec::SemiSupervised { alpha } => {
                out.push_str(&format!("mode semi-supervised alpha={alpha}\n"))
            }
        }
        out.push_str(&format!(
            "sync {}\n",
            match self.sync {
                SyncSpec::PeerToPeer => "p2p",
                SyncSpec::CentralizedBob => "centralized",
                SyncSpec::CentralizedServer => "centralized-server",
                SyncSpec::CentralizedServerDeltas => "centralized-server-deltas",
            }
        ));
        out.push_str(&format!("lr {}\n", self.lr));
        out.push_str(&format!("batch-size {}\n", self.batch_size));
        if let Some(s) = self.steps {
            out.push_str(&format!("steps {s}\n"));
        }
        if let Some(e) = self.epochs {
            out.push_str(&format!("epochs {e}\n"));
        }
        out.push_str(&format!("seed {}\n", self.seed));
        match self.shard_policy {
            ShardPolicy::Contiguous => out.push_str("shard contiguous\n"),
            ShardPolicy::SeededShuffle(s) => out.push_str(&format!("shard shuffled seed={s}\n")),
        }
        out.push_str(&format!(
            "transport {}\n",
            match self.transport {
                TransportChoice::Sim => "sim",
                TransportChoice::Tcp => "tcp",
            }
        ));
        for f in &self.faults {
            match &f.kind {
                FaultKind::Drop => out.push_str(&format!(
                    "fault drop from={} to={} nth={}\n",
                    f.from, f.to, f.nth
                )),
                FaultKind::Corrupt { byte } => out.push_str(&format!(
                    "fault corrupt from={} to={} nth={} byte={byte}\n",
                    f.from, f.to, f.nth
                )),
                FaultKind::Delay => out.push_str(&format!(
                    "fault delay from={} to={} nth={}\n",
                    f.from, f.to, f.nth
                )),
            }
        }
        for d in &self.disconnects {
            out.push_str(&format!(
                "disconnect node={} after-sends={}\n",
                d.node, d.after_sends
            ));
        }
        out
    }

    /// SHA-256 of the canonical echo.
    pub fn config_hash(&self) -> String {
        checksum(self.to_canonical_text().as_bytes()).to_hex()
    }

    /// Builds the (uninitialized) topology; chain layout except for the
    /// semi-supervised branch arrangement.
    pub fn build_topology(&self) -> Result<NetworkTopology, ConfigError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(match l {
                LayerDesc::Fc { input, output, bias } => {
                    LayerSpec::fully_connected(*input, *output, *bias).map_err(NetError::from)?
                }
                LayerDesc::Relu => LayerSpec::Relu,
                LayerDesc::Sigmoid => LayerSpec::Sigmoid,
                LayerDesc::SoftmaxHead => LayerSpec::SoftmaxCrossEntropyHead,
                LayerDesc::MseHead => LayerSpec::MeanSquaredHead,
            });
        }
        let topology = match self.mode {
            ModeSpec::SemiSupervised { .. } => {
                NetworkTopology::branched_autoencoder(layers, self.cuts[0], self.cuts[1])?
            }
            _ => NetworkTopology::chain(layers)?,
        };
        Ok(topology)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# equivalence experiment
experiment eq-check
dataset synthetic classes=3 dim=6 n=96 seed=7
topology fc 6 8 relu fc 8 5 relu fc 5 3 softmax-head
cuts 1
agents 2
schedule round-robin
mode label-sharing
sync p2p
lr 0.1
batch-size 4
epochs 2
seed 42
shard contiguous
transport sim
";

    #[test]
    fn parses_and_round_trips_canonically() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.experiment_id, "eq-check");
        assert_eq!(cfg.agents, 2);
        assert_eq!(cfg.layers.len(), 6);
        assert_eq!(cfg.epochs, Some(2));

        let echo = cfg.to_canonical_text();
        let reparsed = ExperimentConfig::parse(&echo).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(cfg.config_hash(), reparsed.config_hash());
    }

    #[test]
    fn different_configs_hash_differently() {
        let a = ExperimentConfig::parse(SAMPLE).unwrap();
        let mut b = a.clone();
        b.lr = 0.2;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn validation_rejects_inconsistency() {
        let mut cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        cfg.mode = ModeSpec::Wraparound;
        assert!(cfg.validate().is_err());

        let mut cfg2 = ExperimentConfig::parse(SAMPLE).unwrap();
        cfg2.schedule = SchedulePolicy::Single;
        assert!(cfg2.validate().is_err());

        let mut cfg3 = ExperimentConfig::parse(SAMPLE).unwrap();
        cfg3.transport = TransportChoice::Tcp;
        cfg3.faults.push(FaultRule {
            from: "a".into(),
            to: "b".into(),
            nth: 1,
            kind: FaultKind::Drop,
        });
        assert!(cfg3.validate().is_err());
    }

    #[test]
    fn parses_fault_directives() {
        let text = format!("{SAMPLE}fault corrupt from=alice1 to=bob nth=3 byte=9\ndisconnect node=alice1 after-sends=2\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.faults.len(), 1);
        assert_eq!(cfg.disconnects.len(), 1);
        let echo = cfg.to_canonical_text();
        assert_eq!(ExperimentConfig::parse(&echo).unwrap(), cfg);
    }

    #[test]
    fn unknown_directives_are_errors() {
        assert!(ExperimentConfig::parse("volume 11\n").is_err());
        assert!(ExperimentConfig::parse("topology warp 9\n").is_err());
    }
}
