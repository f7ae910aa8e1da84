//! Parameterized layers built on the tape.

use rand::Rng;

use crate::error::Result;
use crate::nn::conv::ConvGeometry;
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{BnStats, Tape, Var};
use crate::tensor::Tensor;

/// Bias-free convolution with Kaiming fan-in normal initialization.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        geom.validate()?;
        let fan_in = geom.in_per_group() * geom.kernel_h * geom.kernel_w;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&geom.weight_shape(), std, rng))?;
        Ok(Self { weight, geom })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d(x, w, self.geom)
    }
}

/// Affine batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnStats,
    pub name: String,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self {
            gamma,
            beta,
            stats: BnStats::new(channels),
            name: name.to_string(),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(x, g, b, &mut self.stats, training)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[out_features, in_features], std, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}
