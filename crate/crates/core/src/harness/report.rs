//! Results emission: per-run series CSVs, comparison tables, and the
//! config echo that makes a run reproducible from its output directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::baselines::ComparisonTable;
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{HarnessError, ResultRecord};

/// Writes one record's artifacts: `<id>_series.csv` (per-epoch train loss),
/// `<id>_result.csv` (the full record), and `<id>_config.txt` (canonical
/// config echo). Returns the paths written.
pub fn emit_record(
    dir: &Path,
    cfg: &ExperimentConfig,
    record: &ResultRecord,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let series = dir.join(format!("{}_series.csv", record.experiment_id));
    let mut f = std::fs::File::create(&series)?;
    writeln!(f, "epoch,train_loss")?;
    for (i, loss) in record.per_epoch_train_loss.iter().enumerate() {
        writeln!(f, "{},{:.12}", i + 1, loss)?;
    }
    written.push(series);

    let result = dir.join(format!("{}_result.csv", record.experiment_id));
    std::fs::write(&result, record.to_csv())?;
    written.push(result);

    let echo = dir.join(format!("{}_config.txt", record.experiment_id));
    std::fs::write(&echo, cfg.to_canonical_text())?;
    written.push(echo);

    Ok(written)
}

/// Writes a full report: every record's artifacts plus the method
/// comparison table when given.
pub fn emit_report(
    dir: &Path,
    runs: &[(ExperimentConfig, ResultRecord)],
    comparison: Option<&ComparisonTable>,
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for (cfg, record) in runs {
        written.extend(emit_record(dir, cfg, record)?);
    }
    if let Some(table) = comparison {
        let path = dir.join("comparison.csv");
        std::fs::write(&path, table.to_csv())?;
        written.push(path.clone());
        let notes = dir.join("comparison_provenance.txt");
        std::fs::write(&notes, table.provenance_notes())?;
        written.push(notes);
    }
    Ok(written)
}
