//! Spectral-norm estimation by alternating a convolution with its adjoint.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_forward, conv2d_transpose_forward, ConvGeometry};
use crate::nn::params::ParamId;
use crate::spectral::SpectralConfig;
use crate::tensor::Tensor;

/// Estimates `||c(a_i)||` for `i = 1..=iterations`, starting from `start`.
/// `start` is overwritten with the final iterate `a_Z`.
///
/// A grouped convolution is block-diagonal, so each group runs its own
/// iteration on its channel slice and the estimate is the largest group
/// estimate. Each group estimate is a Rayleigh quotient of `cᵀc` along its
/// power sequence, so the trace is non-decreasing and never exceeds the
/// largest singular value.
pub fn power_iteration_trace(
    geom: &ConvGeometry,
    weight: &Tensor,
    hw: (usize, usize),
    start: &mut Tensor,
    iterations: usize,
) -> Result<Vec<f64>> {
    if iterations == 0 {
        return Err(Error::Argument("power iteration needs at least one step".into()));
    }
    if weight.max_abs() == 0.0 {
        return Err(Error::Degenerate("all-zero convolution kernel".into()));
    }
    let expected = [1, geom.in_channels, hw.0, hw.1];
    if start.shape() != expected {
        return Err(Error::dim(format!(
            "power-iteration vector {:?}, expected {expected:?}",
            start.shape()
        )));
    }
    let groups = geom.groups;
    let mut a = start.clone();
    normalize_groups(&mut a, groups);
    let mut b = conv2d_forward(&a, weight, geom)?;
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        normalize_groups(&mut b, groups);
        a = conv2d_transpose_forward(&b, weight, geom, hw)?;
        normalize_groups(&mut a, groups);
        b = conv2d_forward(&a, weight, geom)?;
        let sigma = group_norms(&b, groups).into_iter().fold(0.0, f64::max);
        if !sigma.is_finite() {
            return Err(Error::NonFinite("power-iteration estimate".into()));
        }
        trace.push(sigma);
    }
    *start = a;
    Ok(trace)
}

fn group_norms(t: &Tensor, groups: usize) -> Vec<f64> {
    let chunk = t.len() / groups;
    t.data()
        .chunks_exact(chunk)
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Scales each group's slice to unit norm. A slice that collapsed to zero
/// (its kernel block is zero) restarts from the constant vector.
fn normalize_groups(t: &mut Tensor, groups: usize) {
    let chunk = t.len() / groups;
    for g in t.data_mut().chunks_exact_mut(chunk) {
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            g.iter_mut().for_each(|v| *v /= n);
        } else {
            let c = 1.0 / (chunk as f64).sqrt();
            g.iter_mut().for_each(|v| *v = c);
        }
    }
}

/// Standard-normal start vector of unit norm for one `[1, c_in, h, w]` sample.
pub fn random_unit_vector<R: Rng + ?Sized>(channels: usize, (h, w): (usize, usize), rng: &mut R) -> Tensor {
    let mut v = Tensor::randn(&[1, channels, h, w], 1.0, rng);
    let n = v.norm();
    v.scale(1.0 / n);
    v
}

/// One convolution under spectral control: which parameter holds its
/// weights, the input size it runs at, and the warm-started iteration vector.
#[derive(Debug, Clone)]
pub struct ConvHandle {
    pub param: ParamId,
    pub geom: ConvGeometry,
    pub input_hw: (usize, usize),
    vector: Tensor,
    sigma: f64,
}

impl ConvHandle {
    pub fn new<R: Rng + ?Sized>(param: ParamId, geom: ConvGeometry, input_hw: (usize, usize), rng: &mut R) -> Self {
        Self {
            param,
            geom,
            input_hw,
            vector: random_unit_vector(geom.in_channels, input_hw, rng),
            sigma: 0.0,
        }
    }

    /// Last estimate of the largest singular value.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn vector(&self) -> &Tensor {
        &self.vector
    }

    /// Restores persisted state (e.g. from a checkpoint).
    pub fn restore(&mut self, vector: Tensor, sigma: f64) -> Result<()> {
        if vector.shape() != self.vector.shape() {
            return Err(Error::dim(format!(
                "stored power-iteration vector {:?}, expected {:?}",
                vector.shape(),
                self.vector.shape()
            )));
        }
        self.vector = vector;
        self.sigma = sigma;
        Ok(())
    }

    /// Runs `iterations` warm-started steps, keeps the new vector and returns
    /// the estimate `||c(a_Z)||`.
    pub fn power_iteration(&mut self, weight: &Tensor, iterations: usize) -> Result<f64> {
        let trace = power_iteration_trace(&self.geom, weight, self.input_hw, &mut self.vector, iterations)?;
        self.sigma = *trace.last().expect("at least one iteration");
        Ok(self.sigma)
    }

    /// Rescales `weight` by `C / sigma` with sigma from `cfg.power_iterations`
    /// warm-started steps. Returns the estimate taken before rescaling.
    pub fn adjust(&mut self, weight: &mut Tensor, cfg: &SpectralConfig) -> Result<f64> {
        let sigma = self.power_iteration(weight, cfg.power_iterations)?;
        weight.scale(cfg.target_norm / sigma);
        self.sigma = cfg.target_norm;
        Ok(sigma)
    }
}
