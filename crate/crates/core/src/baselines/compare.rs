//! Normalized method comparison: one row per run, each cell tagged with
//! whether it was measured from a run artifact or computed analytically.

use thiserror::Error;

use crate::nn::NetworkTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Computed from the flop/byte model.
    Analytic,
    /// Taken from a run artifact (message log or ledger).
    Measured,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Analytic => "analytic",
            Provenance::Measured => "measured",
        }
    }
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("runs disagree on topology: {0:?} vs {1:?}")]
    TopologyMismatch(String, String),
    #[error("nothing to compare")]
    Empty,
}

/// Structural fingerprint used to refuse cross-topology comparisons.
pub fn topology_fingerprint(topology: &NetworkTopology) -> String {
    let mut parts = Vec::new();
    for layer in topology.layers() {
        match layer {
            crate::nn::LayerSpec::FullyConnected { weight, bias } => parts.push(format!(
                "fc{}x{}{}",
                weight.shape()[0],
                weight.shape()[1],
                if bias.is_some() { "+b" } else { "" }
            )),
            other => parts.push(other.kind_name().to_string()),
        }
    }
    parts.join("-")
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub method: String,
    pub clients: usize,
    pub cut: Option<usize>,
    pub client_flops_per_step: (u64, Provenance),
    pub client_bytes_per_round: (u64, Provenance),
    pub final_accuracy: (f64, Provenance),
    pub topology_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    rows: Vec<RunSummary>,
}

impl ComparisonTable {
    pub fn rows(&self) -> &[RunSummary] {
        &self.rows
    }

    /// Fixed-header CSV: method, clients, cut, client_flops_per_step,
    /// client_bytes_per_round, final_accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,clients,cut,client_flops_per_step,client_bytes_per_round,final_accuracy\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                r.method,
                r.clients,
                r.cut.map(|c| c.to_string()).unwrap_or_default(),
                r.client_flops_per_step.0,
                r.client_bytes_per_round.0,
                r.final_accuracy.0,
            ));
        }
        out
    }

    /// Human-readable per-cell provenance notes.
    pub fn provenance_notes(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{}: flops {} | bytes {} | accuracy {}\n",
                r.method,
                r.client_flops_per_step.1.as_str(),
                r.client_bytes_per_round.1.as_str(),
                r.final_accuracy.1.as_str(),
            ));
        }
        out
    }
}

/// Validates that every run shares one topology and emits the table.
pub fn compare(rows: Vec<RunSummary>) -> Result<ComparisonTable, CompareError> {
    let first = rows.first().ok_or(CompareError::Empty)?;
    for r in &rows[1..] {
        if r.topology_fingerprint != first.topology_fingerprint {
            return Err(CompareError::TopologyMismatch(
                first.topology_fingerprint.clone(),
                r.topology_fingerprint.clone(),
            ));
        }
    }
    Ok(ComparisonTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, fp: &str) -> RunSummary {
        RunSummary {
            method: method.into(),
            clients: 10,
            cut: if method == "split" { Some(1) } else { None },
            client_flops_per_step: (100, Provenance::Analytic),
            client_bytes_per_round: (200, Provenance::Measured),
            final_accuracy: (0.97, Provenance::Measured),
            topology_fingerprint: fp.into(),
        }
    }

    #[test]
    fn csv_has_fixed_header_and_all_rows() {
        let t = compare(vec![row("split", "a"), row("fedavg", "a")]).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,clients,cut,client_flops_per_step,client_bytes_per_round,final_accuracy"
        );
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("split,10,1,"));
        assert!(csv.contains("fedavg,10,,"));
    }

    #[test]
    fn topology_mismatch_is_rejected() {
        assert!(matches!(
            compare(vec![row("split", "a"), row("fedavg", "b")]),
            Err(CompareError::TopologyMismatch(..))
        ));
        assert!(matches!(compare(vec![]), Err(CompareError::Empty)));
    }
}
