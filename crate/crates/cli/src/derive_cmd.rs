//! Genotype derivation from a finished search run.

use std::path::{Path, PathBuf};

use log::info;
use msr_core::derive::{derive_genotype, Genotype, SelectionMode};
use msr_core::rank_table::RankTable;
use msr_core::Error;

use crate::artifacts::{read_metrics, ranks_path, EpochMetrics, CONFIG_FILE, METRICS_FILE};
use crate::config::{EpochPolicy, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Clone)]
pub struct DeriveOutcome {
    /// `None` when the initialization table was used.
    pub epoch: Option<usize>,
    pub genotype: Genotype,
    pub path: PathBuf,
}

/// The epoch whose rank table the policy selects; `None` means the run has
/// no trained epochs and the initialization table stands in.
pub fn select_epoch(policy: EpochPolicy, metrics: &[EpochMetrics]) -> CliResult<Option<usize>> {
    match policy {
        EpochPolicy::Fixed(e) => {
            if metrics.iter().any(|m| m.epoch == e) {
                Ok(Some(e))
            } else {
                Err(Error::Argument(format!(
                    "epoch {e} is not in this run, which has {} epochs",
                    metrics.len()
                ))
                .into())
            }
        }
        EpochPolicy::MinValLoss => {
            let mut best: Option<&EpochMetrics> = None;
            for m in metrics {
                if m.heldout_loss.is_nan() {
                    continue;
                }
                if best.is_none_or(|b| m.heldout_loss < b.heldout_loss) {
                    best = Some(m);
                }
            }
            if best.is_none() && !metrics.is_empty() {
                return Err(Error::Argument("every validation loss in the run is NaN".into()).into());
            }
            Ok(best.map(|m| m.epoch))
        }
    }
}

pub fn genotype_file_name(mode: SelectionMode) -> String {
    format!("genotype_{}.json", mode.name())
}

pub fn run_derive(
    run_dir: &Path,
    epoch: Option<usize>,
    mode: Option<SelectionMode>,
    out: Option<&Path>,
) -> CliResult<DeriveOutcome> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let metrics = read_metrics(&run_dir.join(METRICS_FILE))?;
    let mode = mode.unwrap_or(cfg.mode);
    let policy = epoch.map_or(cfg.genotype_epoch_policy, EpochPolicy::Fixed);
    let chosen = select_epoch(policy, &metrics)?;
    let table_path = ranks_path(run_dir, chosen);
    let text = std::fs::read_to_string(&table_path)
        .map_err(|e| Error::Argument(format!("cannot read rank table {}: {e}", table_path.display())))?;
    let table = RankTable::from_json(&text, &table_path.display().to_string())?;
    let genotype = derive_genotype(&table, mode)?;
    let path = out.map_or_else(|| run_dir.join(genotype_file_name(mode)), Path::to_path_buf);
    std::fs::write(&path, genotype.to_json())?;
    info!(
        "derive: {} mode, policy {policy}, table {} -> {}",
        mode,
        table_path.display(),
        path.display()
    );
    Ok(DeriveOutcome {
        epoch: chosen,
        genotype,
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(losses: &[f64]) -> Vec<EpochMetrics> {
        losses
            .iter()
            .enumerate()
            .map(|(epoch, &l)| EpochMetrics {
                epoch,
                lr: 0.1,
                train_loss: 1.0,
                train_acc: 0.5,
                heldout_loss: l,
                heldout_acc: 0.5,
            })
            .collect()
    }

    #[test]
    fn epoch_policies() {
        let m = rows(&[1.0, 0.8, 0.9]);
        assert_eq!(select_epoch(EpochPolicy::MinValLoss, &m).unwrap(), Some(1));
        assert_eq!(select_epoch(EpochPolicy::Fixed(2), &m).unwrap(), Some(2));
        assert!(matches!(
            select_epoch(EpochPolicy::Fixed(3), &m),
            Err(crate::error::CliError::Core(Error::Argument(_)))
        ));
        assert_eq!(select_epoch(EpochPolicy::MinValLoss, &rows(&[0.5, 0.5])).unwrap(), Some(0));
        assert_eq!(select_epoch(EpochPolicy::MinValLoss, &rows(&[f64::NAN, 0.7])).unwrap(), Some(1));
        assert_eq!(select_epoch(EpochPolicy::MinValLoss, &[]).unwrap(), None);
        let fifty = rows(&[1.0; 50]);
        assert_eq!(select_epoch(EpochPolicy::Fixed(38), &fifty).unwrap(), Some(38));
    }
}
