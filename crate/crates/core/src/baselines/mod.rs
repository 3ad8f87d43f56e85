//! Reference baselines (federated averaging, large-batch global SGD) and
//! the cost accounting used to compare them with split training.

pub mod compare;
pub mod flops;
pub mod ledger;

pub use compare::{compare, topology_fingerprint, ComparisonTable, Provenance, RunSummary};
pub use flops::{matmul_flops, segment_flops, split_client_flops, topology_flops, Pass};
pub use ledger::{ClientCosts, CostLedger};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{DataError, Dataset};
use crate::eval::accuracy;
use crate::nn::{loss_and_gradient, NetworkTopology, SegmentNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FedAvgConfig {
    pub local_epochs: usize,
    /// Fraction of clients selected each round, in (0, 1].
    pub client_fraction: f64,
    pub lr: f64,
    pub rounds: usize,
    pub batch_size: usize,
    /// Seeds per-round client selection when the fraction is below, one.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    /// Final global model.
    pub model: SegmentNet,
    pub ledger: CostLedger,
    /// Test accuracy after each round.
    pub accuracy_trace: Vec<f64>,
    /// Mean training loss per round.
    pub loss_trace: Vec<f64>,
}

fn client_name(i: usize) -> String {
    format!("client{i}")
}

fn select_clients(k: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = ((k as f64 * fraction).floor() as usize).clamp(1, k);
    if m == k {
        return (0..k).collect();
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(
        seed.wrapping_add(round as u64),
    ));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

fn weighted_average(params: &[(Vec<Tensor>, f64)]) -> Result<Vec<Tensor>, DataError> {
    let total: f64 = params.iter().map(|(_, w)| w).sum();
    let n = params[0].0.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut acc = params[0].0[j].scale(params[0].1 / total)?;
        for (p, w) in &params[1..] {
            acc = acc.add(&p[j].scale(w / total)?)?;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Synchronous federated averaging: each selected client copies the global
/// weights, runs local epochs of SGD on its shard, and uploads full weights;
/// the server keeps the shard-size-weighted average. The ledger charges each
/// participating client full-network forward+backward flops for its local
/// steps and one full-model download plus one upload per round.
pub fn fedavg_train(
    net: &NetworkTopology,
    shards: &[Dataset],
    test: &Dataset,
    cfg: &FedAvgConfig,
) -> Result<BaselineRun, DataError> {
    if shards.iter().any(|s| s.is_empty()) {
        return Err(DataError::Inconsistent("empty shard".into()));
    }
    assert!(
        cfg.client_fraction > 0.0 && cfg.client_fraction <= 1.0,
        "client fraction must be in (0, 1]"
    );
    let mut global = SegmentNet::whole(net);
    let model_bytes = global.weight_bytes().len() as u64;
    let mut ledger = CostLedger::new();
    let mut accuracy_trace = Vec::with_capacity(cfg.rounds);
    let mut loss_trace = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let selected = select_clients(shards.len(), cfg.client_fraction, cfg.seed, round);
        let mut locals: Vec<(Vec<Tensor>, f64)> = Vec::with_capacity(selected.len());
        let mut round_loss = 0.0;
        let mut round_batches = 0usize;
        for &i in &selected {
            let name = client_name(i);
            ledger.charge_down(&name, model_bytes);
            let mut local = global.clone();
            for _ in 0..cfg.local_epochs {
                for batch in shards[i].batches(cfg.batch_size) {
                    let out = local.forward(batch.data())?;
                    let (loss, g) = loss_and_gradient(
                        local.loss_kind().expect("baseline nets carry a head"),
                        &out,
                        batch.label().expect("labeled shard"),
                    )?;
                    local.backward(&g, cfg.lr)?;
                    ledger.charge_flops(
                        &name,
                        flops::topology_flops(net, batch.size(), Pass::ForwardBackward),
                    );
                    round_loss += loss;
                    round_batches += 1;
                }
            }
            ledger.charge_up(&name, model_bytes);
            locals.push((local.parameters(), shards[i].len() as f64));
        }
        let averaged = weighted_average(&locals)?;
        global.set_parameters(&averaged)?;
        ledger.snapshot_round(round);
        accuracy_trace.push(accuracy(&mut global, test)?);
        loss_trace.push(round_loss / round_batches.max(1) as f64);
    }
    Ok(BaselineRun {
        model: global,
        ledger,
        accuracy_trace,
        loss_trace,
    })
}

#[derive(Debug, Clone)]
pub struct LargeBatchSgdConfig {
    pub lr: f64,
    pub rounds: usize,
    pub batch_size: usize,
}

/// Large-batch global SGD: every round each client computes full-network
/// gradients on one local batch (cycling through its shard) and uploads
/// them; the server applies the shard-size-weighted average gradient to the
/// global model. Gradient uploads are the size of a weight file.
pub fn large_batch_sgd_train(
    net: &NetworkTopology,
    shards: &[Dataset],
    test: &Dataset,
    cfg: &LargeBatchSgdConfig,
) -> Result<BaselineRun, DataError> {
    if shards.iter().any(|s| s.is_empty()) {
        return Err(DataError::Inconsistent("empty shard".into()));
    }
    let mut global = SegmentNet::whole(net);
    let model_bytes = global.weight_bytes().len() as u64;
    let mut ledger = CostLedger::new();
    let mut accuracy_trace = Vec::with_capacity(cfg.rounds);
    let mut loss_trace = Vec::with_capacity(cfg.rounds);

    let batches_per_shard: Vec<Vec<crate::nn::Batch>> = shards
        .iter()
        .map(|s| s.batches(cfg.batch_size))
        .collect();

    for round in 0..cfg.rounds {
        let mut grads: Vec<(Vec<Tensor>, f64)> = Vec::with_capacity(shards.len());
        let mut round_loss = 0.0;
        for (i, shard_batches) in batches_per_shard.iter().enumerate() {
            let name = client_name(i);
            let batch = &shard_batches[round % shard_batches.len()];
            ledger.charge_down(&name, model_bytes);
            let mut local = global.clone();
            let out = local.forward(batch.data())?;
            let (loss, g) = loss_and_gradient(
                local.loss_kind().expect("baseline nets carry a head"),
                &out,
                batch.label().expect("labeled shard"),
            )?;
            // lr = 0 leaves parameters untouched while recording gradients.
            local.backward(&g, 0.0)?;
            ledger.charge_flops(
                &name,
                flops::topology_flops(net, batch.size(), Pass::ForwardBackward),
            );
            let mut flat: Vec<Tensor> = Vec::new();
            for lg in local.last_grads() {
                flat.push(lg.weight.clone());
                if let Some(b) = &lg.bias {
                    flat.push(b.clone());
                }
            }
            ledger.charge_up(&name, model_bytes);
            round_loss += loss;
            grads.push((flat, shards[i].len() as f64));
        }
        let avg = weighted_average(&grads)?;
        let params = global.parameters();
        let stepped: Vec<Tensor> = params
            .iter()
            .zip(&avg)
            .map(|(p, g)| p.sub(&g.scale(cfg.lr)?))
            .collect::<Result<_, _>>()?;
        global.set_parameters(&stepped)?;
        ledger.snapshot_round(round);
        accuracy_trace.push(accuracy(&mut global, test)?);
        loss_trace.push(round_loss / shards.len() as f64);
    }
    Ok(BaselineRun {
        model: global,
        ledger,
        accuracy_trace,
        loss_trace,
    })
}
