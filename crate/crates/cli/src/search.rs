//! Search stage: train the supernet under the spectral constraint and keep
//! a checkpoint and a rank table per epoch.

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use msr_core::data::split_train_val;
use msr_core::nn::optim::cosine_lr;
use msr_core::supernet::Network;
use msr_core::Error;

use crate::artifacts::{checkpoint_path, ranks_path, EpochMetrics, MetricsLog, RunLock, TimingLog, CONFIG_FILE, METRICS_FILE, TIMING_FILE};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::pipeline::{evaluate, load_datasets, train_epoch, EpochPlan};

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub run_dir: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

pub fn run_search(cfg: &RunConfig) -> CliResult<SearchOutcome> {
    let dir = &cfg.output_dir;
    let _lock = RunLock::acquire(dir)?;
    if dir.join(METRICS_FILE).exists() {
        return Err(Error::Argument(format!("{} already holds a search run", dir.display())).into());
    }
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;

    let (full, _) = load_datasets(cfg)?;
    let (train, val) = split_train_val(&full, &cfg.split)?;
    let (_, h, w) = full.image_shape();
    let net_cfg = cfg.supernet_config(full.num_classes, (h, w));
    let mut net = Network::supernet(&net_cfg, cfg.seed)?;
    info!(
        "search: {} train / {} val samples, {} cells, {} handles, {} parameters",
        train.len(),
        val.len(),
        net_cfg.cells,
        net.handles().len(),
        net.store().numel()
    );

    for _ in 0..cfg.search.warmup_adjustments.max(1) {
        net.adjust_spectral_norms(&cfg.spectral)?;
    }
    net.save_checkpoint(&checkpoint_path(dir, None))?;
    std::fs::write(ranks_path(dir, None), net.collect_rank_table(&cfg.spectral)?.to_json())?;

    let mut metrics = MetricsLog::create(&dir.join(METRICS_FILE), "val")?;
    let mut timing = TimingLog::create(&dir.join(TIMING_FILE))?;
    let mut rows = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.initial_lr)?;
        let plan = EpochPlan {
            epoch,
            lr,
            seed: cfg.seed,
            hyper: &cfg.train,
            spectral: Some(&cfg.spectral),
            augment: cfg.search.augment,
            grad_clip: cfg.search.grad_clip,
        };
        let tr = train_epoch(&mut net, &train, &plan)?;
        net.adjust_spectral_norms(&cfg.spectral)?;
        let va = evaluate(&mut net, &val, cfg.train.batch_size)?;
        let mut table = net.collect_rank_table(&cfg.spectral)?;
        table.epoch = Some(epoch);
        net.save_checkpoint(&checkpoint_path(dir, Some(epoch)))?;
        std::fs::write(ranks_path(dir, Some(epoch)), table.to_json())?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            heldout_loss: va.loss,
            heldout_acc: va.accuracy,
        };
        metrics.append(&row)?;
        let secs = start.elapsed().as_secs_f64();
        timing.append(epoch, secs)?;
        info!(
            "epoch {epoch}: lr {lr:.5} train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4} ({secs:.1}s)",
            tr.loss, tr.accuracy, va.loss, va.accuracy
        );
        rows.push(row);
    }
    Ok(SearchOutcome {
        run_dir: dir.clone(),
        metrics: rows,
    })
}
