use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::tensor::Tensor;

const CROP_PAD: usize = 4;

/// Normalized images `[B, C, H, W]` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Mirrors one `[C, H, W]` image left to right in place.
pub fn hflip(img: &mut [f64], channels: usize, height: usize, width: usize) {
    debug_assert_eq!(img.len(), channels * height * width);
    for row in img.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// Crop of the zero-padded image at offset `(dy, dx)` in `[0, 2 * pad]`.
pub fn random_crop(img: &[f64], (channels, height, width): (usize, usize, usize), pad: usize, (dy, dx): (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..height {
            let sy = y + dy;
            if sy < pad || sy >= height + pad {
                continue;
            }
            for x in 0..width {
                let sx = x + dx;
                if sx < pad || sx >= width + pad {
                    continue;
                }
                out[(c * height + y) * width + x] = img[(c * height + sy - pad) * width + sx - pad];
            }
        }
    }
    out
}

/// One pass over a dataset. With a seed the order is shuffled; the same
/// seed always yields the same batches.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<ChaCha8Rng>,
}

impl<'a> BatchIter<'a> {
    pub fn new(ds: &'a Dataset, batch_size: usize, shuffle_seed: Option<u64>, augment: bool) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let seed = shuffle_seed.unwrap_or(0);
        if shuffle_seed.is_some() {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let augment = augment.then(|| ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
        Self {
            ds,
            order,
            pos: 0,
            batch_size,
            augment,
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let shape = self.ds.image_shape();
        let (c, h, w) = shape;
        let plane = h * w;
        let stats = self.ds.stats();
        let mut data = Vec::with_capacity(idx.len() * self.ds.image_len());
        for &i in idx {
            let mut img = self.ds.image(i);
            if let Some(rng) = self.augment.as_mut() {
                let off = (rng.random_range(0..=2 * CROP_PAD), rng.random_range(0..=2 * CROP_PAD));
                img = random_crop(&img, shape, CROP_PAD, off);
                if rng.random_bool(0.5) {
                    hflip(&mut img, c, h, w);
                }
            }
            for (ch, chan) in img.chunks_exact_mut(plane).enumerate() {
                let (m, s) = (stats.mean[ch], stats.std[ch]);
                for v in chan {
                    *v = (*v - m) / s;
                }
            }
            data.extend(img);
        }
        Some(Batch {
            images: Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape"),
            labels: idx.iter().map(|&i| self.ds.label(i)).collect(),
        })
    }
}
