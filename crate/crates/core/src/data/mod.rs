//! Image datasets, the search split and batch iteration.

mod batch;
mod cifar;
mod synth;

pub use batch::{hflip, random_crop, BatchIter, Batch};
pub use cifar::{load_cifar10, parse_cifar_batch, write_cifar_batch, CIFAR_RECORD};
pub use synth::{synth_dataset, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images quantized to bytes (value `v` stands for `v / 255`) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    stats: ChannelStats,
}

impl Dataset {
    /// Builds a dataset and computes its channel statistics.
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::dim(format!(
                "{} pixel bytes do not hold {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Argument(format!("label {bad} outside [0, {num_classes})")));
        }
        let mut ds = Self {
            name: name.into(),
            num_classes,
            channels,
            height,
            width,
            pixels,
            labels,
            stats: ChannelStats {
                mean: vec![0.0; channels],
                std: vec![1.0; channels],
            },
        };
        ds.stats = ds.compute_stats();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` with values in `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.raw_image(i).iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// All images as an `[M, C, H, W]` tensor in `[0, 1]`.
    pub fn images(&self) -> Tensor {
        Tensor::new(
            vec![self.len(), self.channels, self.height, self.width],
            self.pixels.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("shape matches pixel count")
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// Replaces the normalization statistics, e.g. with those of a train split.
    pub fn with_stats(mut self, stats: ChannelStats) -> Result<Self> {
        if stats.mean.len() != self.channels || stats.std.len() != self.channels {
            return Err(Error::dim(format!(
                "stats for {} channels applied to a {}-channel dataset",
                stats.mean.len(),
                self.channels
            )));
        }
        self.stats = stats;
        Ok(self)
    }

    fn compute_stats(&self) -> ChannelStats {
        let plane = self.height * self.width;
        let mut sum = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for img in self.pixels.chunks_exact(self.image_len()) {
            for (c, chan) in img.chunks_exact(plane).enumerate() {
                for &v in chan {
                    let x = v as f64 / 255.0;
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s > 1e-6 { s } else { 1.0 }
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// The samples at `indices`, keeping this dataset's statistics.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.raw_image(i));
        }
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            stats: self.stats.clone(),
        }
    }

    /// The first `n` samples (all of them if fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Index sets of a seeded random split; the train side has
/// `floor(fraction * m)` samples, kept within `[1, m - 1]`.
pub fn split_indices(m: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if m < 2 {
        return Err(Error::Argument(format!("cannot split {m} samples")));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((spec.train_fraction * m as f64).floor() as usize).clamp(1, m - 1);
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

/// Splits into disjoint train and validation parts; both keep the parent's
/// statistics.
pub fn split_train_val(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}
