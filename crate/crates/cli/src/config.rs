//! Run configuration: a TOML file with dotted keys, parsed strictly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msr_core::data::{SplitSpec, SynthSpec};
use msr_core::derive::SelectionMode;
use msr_core::nn::optim::TrainHyper;
use msr_core::spectral::SpectralConfig;
use msr_core::supernet::SupernetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Which epoch's rank table `derive` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EpochPolicy {
    /// The epoch with the smallest validation loss; the first on ties.
    #[default]
    MinValLoss,
    Fixed(usize),
}

impl fmt::Display for EpochPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpochPolicy::MinValLoss => f.write_str("min_val_loss"),
            EpochPolicy::Fixed(e) => write!(f, "fixed({e})"),
        }
    }
}

impl FromStr for EpochPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "min_val_loss" {
            return Ok(EpochPolicy::MinValLoss);
        }
        s.strip_prefix("fixed(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|e| e.trim().parse().ok())
            .map(EpochPolicy::Fixed)
            .ok_or_else(|| format!("unknown epoch policy {s:?}, expected min_val_loss or fixed(E)"))
    }
}

impl TryFrom<String> for EpochPolicy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<EpochPolicy> for String {
    fn from(p: EpochPolicy) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synth,
    Cifar10,
}

/// Synthetic corpus; the test set is drawn with `test_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
    pub test_seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            classes: s.classes,
            samples_per_class: s.samples_per_class,
            test_samples_per_class: 100,
            height: s.height,
            width: s.width,
            noise: s.noise,
            seed: s.seed,
            test_seed: 1,
        }
    }
}

impl SynthSection {
    pub fn train_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            height: self.height,
            width: self.width,
            channels: 3,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn test_spec(&self) -> SynthSpec {
        SynthSpec {
            samples_per_class: self.test_samples_per_class,
            seed: self.test_seed,
            ..self.train_spec()
        }
    }
}

/// CIFAR-10 binary batches; `train_limit`/`test_limit` keep only the first
/// samples (0 keeps all).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CifarSection {
    pub path: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub synth: SynthSection,
    pub cifar10: CifarSection,
}

/// Cell-network shape; classes and input size come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub cells: usize,
    pub nodes: usize,
    pub channels: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = SupernetConfig::default();
        Self {
            cells: d.cells,
            nodes: d.nodes,
            channels: d.channels,
        }
    }
}

/// Search-stage extras beyond the optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub augment: bool,
    /// Gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Adjustments run once before training so the warm-started vectors
    /// start near the top singular vector.
    pub warmup_adjustments: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            augment: true,
            grad_clip: 0.0,
            warmup_adjustments: 10,
        }
    }
}

/// Evaluation stage: the discrete network is trained from scratch on the
/// full training set without spectral adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub cells: usize,
    pub channels: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            cells: 8,
            channels: 16,
            initial_lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            epochs: 20,
            batch_size: 64,
            grad_clip: 5.0,
            augment: true,
            seed: 0,
        }
    }
}

impl EvalSection {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            initial_lr: self.initial_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds network initialization and batch order.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mode: SelectionMode,
    pub genotype_epoch_policy: EpochPolicy,
    pub dataset: DatasetSection,
    pub supernet: NetSection,
    pub train: TrainHyper,
    pub search: SearchSection,
    pub spectral: SpectralConfig,
    pub split: SplitSpec,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses `text`; relative paths are resolved against `base`.
    pub fn parse(text: &str, source: &str, base: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            source_name: source.to_string(),
            message: e.message().to_string(),
            span: e.span().map(|s| s.start),
        })?;
        if cfg.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config {
                source_name: source.to_string(),
                message: "output_dir is required".into(),
                span: None,
            });
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        if cfg.dataset.kind == DatasetKind::Cifar10 {
            cfg.dataset.cifar10.path = base.join(&cfg.dataset.cifar10.path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Argument(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.spectral.validate()?;
        self.split.validate()?;
        self.eval.hyper().validate()?;
        if self.dataset.kind == DatasetKind::Synth {
            self.dataset.synth.train_spec().validate()?;
        }
        if self.dataset.kind == DatasetKind::Cifar10 && self.dataset.cifar10.path.as_os_str().is_empty() {
            return Err(CliError::Argument("dataset.cifar10.path is required for the cifar10 dataset".into()));
        }
        if self.search.grad_clip < 0.0 || self.eval.grad_clip < 0.0 {
            return Err(CliError::Argument("grad_clip must be >= 0".into()));
        }
        if self.eval.cells == 0 || self.eval.channels == 0 {
            return Err(CliError::Argument("eval.cells and eval.channels must be positive".into()));
        }
        if self.supernet.cells < 3 {
            return Err(CliError::Argument(format!(
                "supernet.cells must be >= 3 so both cell types occur, got {}",
                self.supernet.cells
            )));
        }
        // shape checks only; classes and input size are placeholders here
        self.supernet_config(1, (8, 8)).validate()?;
        Ok(())
    }

    pub fn supernet_config(&self, num_classes: usize, input_size: (usize, usize)) -> SupernetConfig {
        SupernetConfig {
            cells: self.supernet.cells,
            nodes: self.supernet.nodes,
            channels: self.supernet.channels,
            num_classes,
            input_channels: 3,
            input_size,
        }
    }

    pub fn eval_config(&self, num_classes: usize, input_size: (usize, usize)) -> SupernetConfig {
        SupernetConfig {
            cells: self.eval.cells,
            channels: self.eval.channels,
            ..self.supernet_config(num_classes, input_size)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_defaults() {
        let text = r#"
output_dir = "runs/a"
mode = "max"
genotype_epoch_policy = "fixed(38)"
train.initial_lr = 0.05
supernet.cells = 4
dataset.synth.samples_per_class = 20
"#;
        let cfg = RunConfig::parse(text, "c.toml", Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, Path::new("/base/runs/a"));
        assert_eq!(cfg.mode, SelectionMode::MaxStableRank);
        assert_eq!(cfg.genotype_epoch_policy, EpochPolicy::Fixed(38));
        assert_eq!(cfg.train.initial_lr, 0.05);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.supernet.cells, 4);
        assert_eq!(cfg.dataset.synth.samples_per_class, 20);
        assert_eq!(cfg.spectral, SpectralConfig::default());
        let again = RunConfig::parse(&cfg.to_toml(), "c.toml", Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let typo = "output_dir = \"r\"\ntrain.intial_lr = 0.1\n";
        match RunConfig::parse(typo, "c.toml", Path::new(".")) {
            Err(CliError::Config { message, .. }) => assert!(message.contains("intial_lr"), "{message}"),
            other => panic!("{other:?}"),
        }
        let bad = "output_dir = \"r\"\ntrain.initial_lr = -1.0\n";
        assert!(matches!(RunConfig::parse(bad, "c.toml", Path::new(".")), Err(CliError::Core(_))));
        let policy = "output_dir = \"r\"\ngenotype_epoch_policy = \"latest\"\n";
        assert!(matches!(RunConfig::parse(policy, "c.toml", Path::new(".")), Err(CliError::Config { .. })));
        assert!(matches!(RunConfig::parse("", "c.toml", Path::new(".")), Err(CliError::Config { .. })));
    }

    #[test]
    fn policy_strings() {
        assert_eq!("min_val_loss".parse::<EpochPolicy>().unwrap(), EpochPolicy::MinValLoss);
        assert_eq!("fixed(7)".parse::<EpochPolicy>().unwrap(), EpochPolicy::Fixed(7));
        assert_eq!(EpochPolicy::Fixed(7).to_string(), "fixed(7)");
        assert!("fixed()".parse::<EpochPolicy>().is_err());
    }
}
