//! Per-client cost accounting: flops and transfer bytes, with per-round
//! snapshots. Counters only ever increase.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientCosts {
    pub flops: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone)]
pub struct RoundSnapshot {
    pub round: usize,
    pub per_client: BTreeMap<String, ClientCosts>,
}

#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    clients: BTreeMap<String, ClientCosts>,
    rounds: Vec<RoundSnapshot>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge_flops(&mut self, client: &str, flops: u64) {
        self.clients.entry(client.to_string()).or_default().flops += flops;
    }

    pub fn charge_up(&mut self, client: &str, bytes: u64) {
        self.clients.entry(client.to_string()).or_default().bytes_up += bytes;
    }

    pub fn charge_down(&mut self, client: &str, bytes: u64) {
        self.clients
            .entry(client.to_string())
            .or_default()
            .bytes_down += bytes;
    }

    /// Records the cumulative totals at the end of a round.
    pub fn snapshot_round(&mut self, round: usize) {
        self.rounds.push(RoundSnapshot {
            round,
            per_client: self.clients.clone(),
        });
    }

    pub fn totals(&self, client: &str) -> ClientCosts {
        self.clients.get(client).copied().unwrap_or_default()
    }

    pub fn clients(&self) -> impl Iterator<Item = (&str, &ClientCosts)> {
        self.clients.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn rounds(&self) -> &[RoundSnapshot] {
        &self.rounds
    }

    /// Highest per-client flop total.
    pub fn max_client_flops(&self) -> u64 {
        self.clients.values().map(|c| c.flops).max().unwrap_or(0)
    }

    /// Mean per-client totals.
    pub fn mean_costs(&self) -> ClientCosts {
        let n = self.clients.len().max(1) as u64;
        let mut acc = ClientCosts::default();
        for c in self.clients.values() {
            acc.flops += c.flops;
            acc.bytes_up += c.bytes_up;
            acc.bytes_down += c.bytes_down;
        }
        ClientCosts {
            flops: acc.flops / n,
            bytes_up: acc.bytes_up / n,
            bytes_down: acc.bytes_down / n,
        }
    }
}
