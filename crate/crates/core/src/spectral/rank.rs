//! Matrix-view norms, stable rank and noise sensitivity of convolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_forward, ConvGeometry};
use crate::spectral::power::{power_iteration_trace, random_unit_vector};
use crate::spectral::{FrobeniusMode, SpectralConfig};
use crate::tensor::Tensor;

/// Frobenius norm of the convolution's matrix at input size `h x w`.
///
/// Every weight `w[o, i, kh, kw]` appears once per output position whose
/// tap lands inside the input, so the squared norm is `sum w^2 * coverage`.
pub fn frobenius_norm_of_map(geom: &ConvGeometry, weight: &Tensor, (h, w): (usize, usize)) -> Result<f64> {
    geom.validate()?;
    let (kh_n, kw_n) = (geom.kernel_h, geom.kernel_w);
    let mut coverage = vec![0.0; kh_n * kw_n];
    for kh in 0..kh_n {
        for kw in 0..kw_n {
            coverage[kh * kw_n + kw] = geom.tap_coverage(kh, kw, h, w)? as f64;
        }
    }
    if weight.len() != geom.weight_len() {
        return Err(Error::dim(format!("weight {:?} for {geom:?}", weight.shape())));
    }
    let total: f64 = weight
        .data()
        .chunks(kh_n * kw_n)
        .map(|k| k.iter().zip(&coverage).map(|(v, c)| v * v * c).sum::<f64>())
        .sum();
    Ok(total.sqrt())
}

/// Components of one stable-rank evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableRank {
    pub rank: f64,
    pub frobenius: f64,
    pub sigma: f64,
}

/// `||c||_F^2 / sigma^2` with sigma from `cfg.rank_iterations` cold-start
/// power iterations seeded by `cfg.seed`. Power iteration under-estimates
/// sigma, so this over-estimates the exact stable rank slightly.
pub fn stable_rank(geom: &ConvGeometry, weight: &Tensor, hw: (usize, usize), cfg: &SpectralConfig) -> Result<StableRank> {
    stable_rank_seeded(geom, weight, hw, cfg, cfg.seed)
}

pub fn stable_rank_seeded(
    geom: &ConvGeometry,
    weight: &Tensor,
    hw: (usize, usize),
    cfg: &SpectralConfig,
    seed: u64,
) -> Result<StableRank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = random_unit_vector(geom.in_channels, hw, &mut rng);
    let sigma = *power_iteration_trace(geom, weight, hw, &mut a, cfg.rank_iterations)?
        .last()
        .expect("non-empty trace");
    let frobenius = match cfg.frobenius {
        FrobeniusMode::Matrix => frobenius_norm_of_map(geom, weight, hw)?,
        FrobeniusMode::Kernel => weight.norm(),
    };
    Ok(StableRank {
        rank: (frobenius / sigma).powi(2),
        frobenius,
        sigma,
    })
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSensitivity {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Mean of `||c(x + eta*||x||) - c(x)||^2 / ||c(x)||^2` over standard-normal
/// `eta`, for a single `[1, c_in, h, w]` input `x`.
pub fn noise_sensitivity(
    geom: &ConvGeometry,
    weight: &Tensor,
    x: &Tensor,
    samples: usize,
    seed: u64,
) -> Result<NoiseSensitivity> {
    if samples == 0 {
        return Err(Error::Argument("noise sensitivity needs at least one sample".into()));
    }
    let (n, c, h, w) = x.nchw()?;
    if n != 1 {
        return Err(Error::dim(format!("expected a single input sample, got batch {n}")));
    }
    let clean = conv2d_forward(x, weight, geom)?;
    let denom = clean.norm_sq();
    if denom == 0.0 {
        return Err(Error::Degenerate("c(x) = 0; noise sensitivity undefined".into()));
    }
    let xnorm = x.norm();
    let dim = c * h * w;
    let out_dim = clean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = 256;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut done = 0;
    while done < samples {
        let count = chunk.min(samples - done);
        let mut noisy = Vec::with_capacity(count * dim);
        for _ in 0..count {
            for v in x.data() {
                let eta: f64 = StandardNormal.sample(&mut rng);
                noisy.push(v + eta * xnorm);
            }
        }
        let y = conv2d_forward(&Tensor::new(vec![count, c, h, w], noisy)?, weight, geom)?;
        for out in y.data().chunks(out_dim) {
            let r = out
                .iter()
                .zip(clean.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / denom;
            sum += r;
            sum_sq += r * r;
        }
        done += count;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = if samples > 1 {
        ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(NoiseSensitivity {
        mean,
        std_error: (var / k).sqrt(),
        samples,
    })
}

/// Expected noise sensitivity of a linear map: `||x||^2 ||c||_F^2 / ||c(x)||^2`.
pub fn noise_sensitivity_closed_form(geom: &ConvGeometry, weight: &Tensor, x: &Tensor) -> Result<f64> {
    let (_, _, h, w) = x.nchw()?;
    let cx = conv2d_forward(x, weight, geom)?.norm_sq();
    if cx == 0.0 {
        return Err(Error::Degenerate("c(x) = 0; noise sensitivity undefined".into()));
    }
    let f = frobenius_norm_of_map(geom, weight, (h, w))?;
    Ok(x.norm_sq() * f * f / cx)
}
