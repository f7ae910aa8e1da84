//! Run-directory files: lock, metrics log, per-epoch artifact names.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use msr_core::Error;

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".msr.lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// `checkpoint_init.msrn` for the initialization state, else `checkpoint_{e}.msrn`.
pub fn checkpoint_path(dir: &Path, epoch: Option<usize>) -> PathBuf {
    dir.join(format!("checkpoint_{}.msrn", epoch_tag(epoch)))
}

pub fn ranks_path(dir: &Path, epoch: Option<usize>) -> PathBuf {
    dir.join(format!("ranks_{}.json", epoch_tag(epoch)))
}

fn epoch_tag(epoch: Option<usize>) -> String {
    epoch.map_or_else(|| "init".to_string(), |e| e.to_string())
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = std::fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::Lock(format!(
                    "{} is locked by process {}; remove {} if no run is active",
                    dir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// One epoch of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Held-out loss: validation split in search, test set in eval.
    pub heldout_loss: f64,
    pub heldout_acc: f64,
}

/// Append-only CSV with a fixed header. Values are written in shortest
/// round-trip form, so identical runs give identical bytes.
pub struct MetricsLog {
    file: File,
    last_epoch: Option<usize>,
}

pub fn metrics_header(heldout: &str) -> String {
    format!("epoch,lr,train_loss,train_acc,{heldout}_loss,{heldout}_acc")
}

impl MetricsLog {
    pub fn create(path: &Path, heldout: &str) -> CliResult<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{}", metrics_header(heldout))?;
        Ok(Self { file, last_epoch: None })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> CliResult<()> {
        if self.last_epoch.is_some_and(|last| m.epoch <= last) {
            return Err(Error::State(format!("metrics epoch {} does not follow {:?}", m.epoch, self.last_epoch)).into());
        }
        writeln!(
            self.file,
            "{},{},{},{},{},{}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.heldout_loss, m.heldout_acc
        )?;
        self.file.flush()?;
        self.last_epoch = Some(m.epoch);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<EpochMetrics>> {
    let source = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::format(&source, 0, format!("cannot read: {e}")))?;
    let mut offset = 0u64;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() as u64 + 1;
        if n == 0 {
            if line != metrics_header("val") && line != metrics_header("test") {
                return Err(Error::format(&source, 0, format!("unexpected header {line:?}")).into());
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::format(&source, at, format!("line {}: {what}", n + 1));
        if fields.len() != 6 {
            return Err(bad("expected 6 fields").into());
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|_| bad("malformed number"));
        let m = EpochMetrics {
            epoch: fields[0].parse().map_err(|_| bad("malformed epoch"))?,
            lr: num(1)?,
            train_loss: num(2)?,
            train_acc: num(3)?,
            heldout_loss: num(4)?,
            heldout_acc: num(5)?,
        };
        if rows.last().is_some_and(|p: &EpochMetrics| m.epoch <= p.epoch) {
            return Err(bad("epochs are not increasing").into());
        }
        rows.push(m);
    }
    if text.is_empty() {
        return Err(Error::format(&source, 0, "empty metrics file").into());
    }
    Ok(rows)
}

/// Wall-clock seconds per epoch, kept apart from the deterministic metrics.
pub struct TimingLog {
    file: File,
}

impl TimingLog {
    pub fn create(path: &Path) -> CliResult<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "epoch,wall_seconds")?;
        Ok(Self { file })
    }

    pub fn append(&mut self, epoch: usize, seconds: f64) -> CliResult<()> {
        writeln!(self.file, "{epoch},{seconds:.3}")?;
        self.file.flush()?;
        Ok(())
    }
}
