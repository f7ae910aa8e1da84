//! Evaluation stage: train the derived discrete network from scratch and
//! report test loss and error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use msr_core::derive::Genotype;
use msr_core::nn::optim::cosine_lr;
use msr_core::supernet::{CellType, Network};
use msr_core::Error;
use serde::Serialize;

use crate::artifacts::{EpochMetrics, MetricsLog, RunLock, TimingLog, METRICS_FILE, TIMING_FILE};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::pipeline::{evaluate, load_datasets, train_epoch, EpochPlan};

pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub genotype: String,
    pub epochs: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub test_error: f64,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn load_genotype(path: &Path) -> CliResult<Genotype> {
    let source = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::format(&source, 0, format!("cannot read: {e}")))?;
    Ok(Genotype::from_json(&text, &source)?)
}

pub fn default_eval_dir(cfg: &RunConfig, genotype_path: &Path) -> PathBuf {
    let stem = genotype_path.file_stem().map_or_else(|| "genotype".into(), |s| s.to_string_lossy().into_owned());
    cfg.output_dir.join(format!("eval_{stem}"))
}

pub fn run_eval(genotype_path: &Path, cfg: &RunConfig, out: Option<&Path>) -> CliResult<EvalOutcome> {
    let genotype = load_genotype(genotype_path)?;
    if genotype.nodes() != cfg.supernet.nodes {
        return Err(Error::Argument(format!(
            "genotype describes {}-node cells but the config has supernet.nodes = {}",
            genotype.nodes(),
            cfg.supernet.nodes
        ))
        .into());
    }
    let dir = out.map_or_else(|| default_eval_dir(cfg, genotype_path), Path::to_path_buf);
    let _lock = RunLock::acquire(&dir)?;

    let (train, test) = load_datasets(cfg)?;
    let (_, h, w) = train.image_shape();
    let net_cfg = cfg.eval_config(train.num_classes, (h, w));
    let mut net = Network::discrete(
        &net_cfg,
        &genotype.cell_plan(CellType::Normal),
        &genotype.cell_plan(CellType::Reduce),
        cfg.eval.seed,
    )?;
    info!(
        "eval: {} train / {} test samples, {} cells, {} parameters",
        train.len(),
        test.len(),
        net_cfg.cells,
        net.store().numel()
    );

    let hyper = cfg.eval.hyper();
    let mut metrics = MetricsLog::create(&dir.join(METRICS_FILE), "test")?;
    let mut timing = TimingLog::create(&dir.join(TIMING_FILE))?;
    let mut last = evaluate(&mut net, &test, hyper.batch_size)?;
    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, hyper.epochs, hyper.initial_lr)?;
        let plan = EpochPlan {
            epoch,
            lr,
            seed: cfg.eval.seed,
            hyper: &hyper,
            spectral: None,
            augment: cfg.eval.augment,
            grad_clip: cfg.eval.grad_clip,
        };
        let tr = train_epoch(&mut net, &train, &plan)?;
        last = evaluate(&mut net, &test, hyper.batch_size)?;
        metrics.append(&EpochMetrics {
            epoch,
            lr,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            heldout_loss: last.loss,
            heldout_acc: last.accuracy,
        })?;
        let secs = start.elapsed().as_secs_f64();
        timing.append(epoch, secs)?;
        info!(
            "eval epoch {epoch}: lr {lr:.5} train_loss {:.4} train_acc {:.4} test_loss {:.4} test_acc {:.4} ({secs:.1}s)",
            tr.loss, tr.accuracy, last.loss, last.accuracy
        );
    }
    let outcome = EvalOutcome {
        genotype: genotype_path.display().to_string(),
        epochs: hyper.epochs,
        test_loss: last.loss,
        test_accuracy: last.accuracy,
        test_error: 1.0 - last.accuracy,
        out_dir: dir.clone(),
    };
    let mut json = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
    json.push('\n');
    std::fs::write(dir.join(RESULT_FILE), json)?;
    Ok(outcome)
}
