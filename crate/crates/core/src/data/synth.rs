//! Class-conditional synthetic images: each class has its own stripe
//! orientation, stripe frequency, colour balance and intensity ramp.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Per-pixel Gaussian noise std; also scales the random stripe phase.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 250,
            height: 16,
            width: 16,
            channels: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Argument(format!(
                "synthetic images need at least 8x8 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes == 0 || self.classes > 256 || self.samples_per_class == 0 || self.channels == 0 {
            return Err(Error::Argument(
                "synthetic dataset needs 1..=256 classes and at least one sample and channel".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Argument(format!("noise must be finite and nonnegative, got {}", self.noise)));
        }
        Ok(())
    }
}

fn render(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let k = class as f64 / spec.classes as f64;
    let theta = PI * k;
    let freq = 2.0 + (class % 3) as f64;
    let phase = spec.noise * PI * rng.random_range(-1.0..1.0);
    let (s, c) = theta.sin_cos();
    for ch in 0..spec.channels {
        let tint = (2.0 * PI * (k + ch as f64 / spec.channels as f64)).cos();
        for y in 0..spec.height {
            for x in 0..spec.width {
                let u = (x as f64 / spec.width as f64 - 0.5) * c + (y as f64 / spec.height as f64 - 0.5) * s;
                let mut v = 0.5 + 0.25 * tint * (2.0 * PI * freq * u + phase).sin() + 0.3 * u * tint;
                if spec.noise > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v += spec.noise * z;
                }
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
}

/// Samples are grouped by class; reproducible from the `SynthSpec` alone.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.classes * spec.samples_per_class;
    let mut pixels = Vec::with_capacity(m * spec.channels * spec.height * spec.width);
    let mut labels = Vec::with_capacity(m);
    for class in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            render(spec, class, &mut rng, &mut pixels);
            labels.push(class as u8);
        }
    }
    Dataset::new(
        format!("synth-{}", spec.seed),
        spec.classes,
        (spec.channels, spec.height, spec.width),
        pixels,
        labels,
    )
}
