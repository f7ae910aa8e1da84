//! Dataset loading and the epoch loops shared by search and eval.

use msr_core::data::{load_cifar10, synth_dataset, BatchIter, Dataset};
use msr_core::nn::optim::TrainHyper;
use msr_core::spectral::SpectralConfig;
use msr_core::supernet::{BatchStats, Network};
use msr_core::Result;

use crate::config::{DatasetKind, RunConfig};

/// Training and test sets; the test set carries the training statistics.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.kind {
        DatasetKind::Synth => {
            let s = &cfg.dataset.synth;
            let train = synth_dataset(&s.train_spec())?;
            let test = synth_dataset(&s.test_spec())?.with_stats(train.stats().clone())?;
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let c = &cfg.dataset.cifar10;
            let (mut train, mut test) = load_cifar10(&c.path)?;
            if c.train_limit > 0 {
                train = train.truncated(c.train_limit);
            }
            if c.test_limit > 0 {
                test = test.truncated(c.test_limit);
            }
            Ok((train, test))
        }
    }
}

/// Distinct, reproducible shuffle seed per epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Default)]
struct Mean {
    loss: f64,
    correct: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, s: &BatchStats, n: usize) {
        self.loss += s.loss * n as f64;
        self.correct += s.accuracy * n as f64;
        self.n += n;
    }

    fn finish(&self) -> BatchStats {
        let n = self.n.max(1) as f64;
        BatchStats {
            loss: self.loss / n,
            accuracy: self.correct / n,
        }
    }
}

pub struct EpochPlan<'a> {
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hyper: &'a TrainHyper,
    pub spectral: Option<&'a SpectralConfig>,
    pub augment: bool,
    /// 0 disables clipping.
    pub grad_clip: f64,
}

/// One pass over `train`; returns the sample-weighted mean loss and accuracy.
pub fn train_epoch(net: &mut Network, train: &Dataset, plan: &EpochPlan) -> Result<BatchStats> {
    let mut mean = Mean::default();
    let clip = (plan.grad_clip > 0.0).then_some(plan.grad_clip);
    let batches = BatchIter::new(train, plan.hyper.batch_size, Some(epoch_seed(plan.seed, plan.epoch)), plan.augment);
    for batch in batches {
        let s = net.train_step(&batch.images, &batch.labels, plan.lr, plan.hyper, plan.spectral, clip)?;
        mean.add(&s, batch.labels.len());
    }
    net.epoch = plan.epoch + 1;
    Ok(mean.finish())
}

/// Loss and accuracy over a whole dataset with frozen batch-norm statistics.
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize) -> Result<BatchStats> {
    let mut mean = Mean::default();
    for batch in BatchIter::new(ds, batch_size, None, false) {
        let s = net.evaluate(&batch.images, &batch.labels)?;
        mean.add(&s, batch.labels.len());
    }
    Ok(mean.finish())
}
