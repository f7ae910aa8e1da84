//! Momentum SGD with coupled weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            initial_lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            epochs: 50,
            batch_size: 64,
        }
    }
}

impl TrainHyper {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Argument(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Argument(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`
pub fn sgd_momentum_step(store: &mut ParamStore, lr: f64, hyper: &TrainHyper) {
    for p in store.iter_mut() {
        let values = p.value.data_mut();
        for ((v, m), g) in values
            .iter_mut()
            .zip(p.momentum.data_mut())
            .zip(p.grad.data())
        {
            *m = hyper.momentum * *m + g + hyper.weight_decay * *v;
            *v -= lr * *m;
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total = store
        .iter()
        .map(|(_, p)| p.grad.norm_sq())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let k = max_norm / (total + 1e-6);
        for p in store.iter_mut() {
            p.grad.scale(k);
        }
    }
    total
}

/// `initial_lr * (1 + cos(pi * epoch / total_epochs)) / 2`
pub fn cosine_lr(epoch: usize, total_epochs: usize, initial_lr: f64) -> Result<f64> {
    if epoch > total_epochs {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    if total_epochs == 0 {
        return Ok(initial_lr);
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(initial_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
