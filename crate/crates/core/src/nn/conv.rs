//! Direct 2-d cross-correlation kernels over NCHW tensors.
//!
//! All three kernels (forward, adjoint, weight gradient) share the same
//! index map `in = out * stride + tap * dilation - padding`; positions that
//! fall into the zero padding are skipped by clipping the output range per
//! tap instead of branching per element.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape and hyper-parameters of a bias-free convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Square kernel with stride 1, no padding, no dilation and a single group.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.dilation,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(Error::Argument(format!(
                "convolution extents must be positive: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Argument(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    fn out_extent(&self, n_in: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = n_in + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.out_extent(h, self.kernel_h), self.out_extent(w, self.kernel_w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::dim(format!(
                "kernel {}x{} with dilation {} does not fit a {h}x{w} input padded by {}",
                self.kernel_h, self.kernel_w, self.dilation, self.padding
            ))),
        }
    }

    /// Dimension of the flattened input space for one sample.
    pub fn input_dim(&self, h: usize, w: usize) -> usize {
        self.in_channels * h * w
    }

    pub fn output_dim(&self, h: usize, w: usize) -> Result<usize> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok(self.out_channels * oh * ow)
    }

    /// Output positions whose tap `k` lands inside an input of extent `n_in`.
    fn tap_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = (k * self.dilation) as isize - self.padding as isize;
        // need 0 <= o*s + off < n_in
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = n_in as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(n_out as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    /// Number of output positions covered by tap `(kh, kw)`; the squared norm of
    /// the map is the sum of `w^2` times these counts.
    pub fn tap_coverage(&self, kh: usize, kw: usize, h: usize, w: usize) -> Result<usize> {
        let (oh, ow) = self.output_hw(h, w)?;
        let (h0, h1) = self.tap_range(kh, h, oh);
        let (w0, w1) = self.tap_range(kw, w, ow);
        Ok((h1 - h0) * (w1 - w0))
    }

    fn check_weight(&self, weight: &Tensor) -> Result<()> {
        self.validate()?;
        if weight.shape() != self.weight_shape() {
            return Err(Error::dim(format!(
                "weight shape {:?} does not match convolution {:?}",
                weight.shape(),
                self.weight_shape()
            )));
        }
        Ok(())
    }
}

/// A convolution together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub geometry: ConvGeometry,
    pub weight: Tensor,
}

impl ConvSpec {
    pub fn new(geometry: ConvGeometry, weight: Tensor) -> Result<Self> {
        geometry.check_weight(&weight)?;
        Ok(Self { geometry, weight })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d_forward(input, &self.weight, &self.geometry)
    }

    pub fn transpose(&self, grad: &Tensor, input_hw: (usize, usize)) -> Result<Tensor> {
        conv2d_transpose_forward(grad, &self.weight, &self.geometry, input_hw)
    }
}

/// Cross-correlation of an `[n, c_in, h, w]` input with zero padding.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    g.check_weight(weight)?;
    let (n, c, h, w) = input.nchw()?;
    if c != g.in_channels {
        return Err(Error::dim(format!(
            "convolution expects {} input channels, got {c}",
            g.in_channels
        )));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    let in_sample = c * h * w;
    let out_sample = g.out_channels * oh * ow;
    let mut out = vec![0.0; n * out_sample];
    let x = input.data();
    let wt = weight.data();
    out.par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            let src = &x[b * in_sample..(b + 1) * in_sample];
            forward_sample(g, wt, src, (h, w), dst, (oh, ow));
        });
    Tensor::new(vec![n, g.out_channels, oh, ow], out)
}

fn forward_sample(
    g: &ConvGeometry,
    wt: &[f64],
    src: &[f64],
    (h, w): (usize, usize),
    dst: &mut [f64],
    (oh, ow): (usize, usize),
) {
    let cin_g = g.in_per_group();
    let cout_g = g.out_per_group();
    let (s, d, p) = (g.stride, g.dilation, g.padding);
    for oc in 0..g.out_channels {
        let group = oc / cout_g;
        let out_plane = &mut dst[oc * oh * ow..(oc + 1) * oh * ow];
        for icl in 0..cin_g {
            let ic = group * cin_g + icl;
            let in_plane = &src[ic * h * w..(ic + 1) * h * w];
            for kh in 0..g.kernel_h {
                let (h0, h1) = g.tap_range(kh, h, oh);
                for kw in 0..g.kernel_w {
                    let (w0, w1) = g.tap_range(kw, w, ow);
                    if w0 >= w1 {
                        continue;
                    }
                    let k = wt[((oc * cin_g + icl) * g.kernel_h + kh) * g.kernel_w + kw];
                    for r in h0..h1 {
                        let ih = r * s + kh * d - p;
                        let out_row = &mut out_plane[r * ow..(r + 1) * ow];
                        let in_row = &in_plane[ih * w..(ih + 1) * w];
                        if s == 1 {
                            let iw0 = w0 + kw * d - p;
                            let len = w1 - w0;
                            for (o, i) in out_row[w0..w1].iter_mut().zip(&in_row[iw0..iw0 + len]) {
                                *o += k * i;
                            }
                        } else {
                            for (c, o) in out_row[w0..w1].iter_mut().enumerate() {
                                *o += k * in_row[(w0 + c) * s + kw * d - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d_forward`]: maps an output-shaped tensor back to the
/// input space of spatial size `input_hw`. Also the input gradient.
pub fn conv2d_transpose_forward(
    grad: &Tensor,
    weight: &Tensor,
    g: &ConvGeometry,
    (h, w): (usize, usize),
) -> Result<Tensor> {
    g.check_weight(weight)?;
    let (n, c, gh, gw) = grad.nchw()?;
    let (oh, ow) = g.output_hw(h, w)?;
    if c != g.out_channels || gh != oh || gw != ow {
        return Err(Error::dim(format!(
            "transposed convolution expects [_, {}, {oh}, {ow}], got {:?}",
            g.out_channels,
            grad.shape()
        )));
    }
    let in_sample = g.in_channels * h * w;
    let out_sample = c * oh * ow;
    let mut out = vec![0.0; n * in_sample];
    let gy = grad.data();
    let wt = weight.data();
    out.par_chunks_mut(in_sample.max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            let src = &gy[b * out_sample..(b + 1) * out_sample];
            transpose_sample(g, wt, src, (oh, ow), dst, (h, w));
        });
    Tensor::new(vec![n, g.in_channels, h, w], out)
}

fn transpose_sample(
    g: &ConvGeometry,
    wt: &[f64],
    src: &[f64],
    (oh, ow): (usize, usize),
    dst: &mut [f64],
    (h, w): (usize, usize),
) {
    let cin_g = g.in_per_group();
    let cout_g = g.out_per_group();
    let (s, d, p) = (g.stride, g.dilation, g.padding);
    for oc in 0..g.out_channels {
        let group = oc / cout_g;
        let gplane = &src[oc * oh * ow..(oc + 1) * oh * ow];
        for icl in 0..cin_g {
            let ic = group * cin_g + icl;
            let in_plane = &mut dst[ic * h * w..(ic + 1) * h * w];
            for kh in 0..g.kernel_h {
                let (h0, h1) = g.tap_range(kh, h, oh);
                for kw in 0..g.kernel_w {
                    let (w0, w1) = g.tap_range(kw, w, ow);
                    if w0 >= w1 {
                        continue;
                    }
                    let k = wt[((oc * cin_g + icl) * g.kernel_h + kh) * g.kernel_w + kw];
                    for r in h0..h1 {
                        let ih = r * s + kh * d - p;
                        let grow = &gplane[r * ow..(r + 1) * ow];
                        let in_row = &mut in_plane[ih * w..(ih + 1) * w];
                        if s == 1 {
                            let iw0 = w0 + kw * d - p;
                            let len = w1 - w0;
                            for (i, o) in in_row[iw0..iw0 + len].iter_mut().zip(&grow[w0..w1]) {
                                *i += k * o;
                            }
                        } else {
                            for (c, o) in grow[w0..w1].iter().enumerate() {
                                in_row[(w0 + c) * s + kw * d - p] += k * o;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `<grad, conv(input)>` with respect to the weights.
pub fn conv2d_weight_grad(input: &Tensor, grad: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    g.validate()?;
    let (n, c, h, w) = input.nchw()?;
    let (oh, ow) = g.output_hw(h, w)?;
    if c != g.in_channels || grad.shape() != [n, g.out_channels, oh, ow] {
        return Err(Error::dim(format!(
            "weight gradient: input {:?} and output gradient {:?} disagree with {g:?}",
            input.shape(),
            grad.shape()
        )));
    }
    let cin_g = g.in_per_group();
    let cout_g = g.out_per_group();
    let (s, d, p) = (g.stride, g.dilation, g.padding);
    let per_oc = cin_g * g.kernel_h * g.kernel_w;
    let mut out = vec![0.0; g.out_channels * per_oc];
    let x = input.data();
    let gy = grad.data();
    out.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
        let group = oc / cout_g;
        for b in 0..n {
            let gplane = &gy[(b * g.out_channels + oc) * oh * ow..][..oh * ow];
            for icl in 0..cin_g {
                let ic = group * cin_g + icl;
                let in_plane = &x[(b * c + ic) * h * w..][..h * w];
                for kh in 0..g.kernel_h {
                    let (h0, h1) = g.tap_range(kh, h, oh);
                    for kw in 0..g.kernel_w {
                        let (w0, w1) = g.tap_range(kw, w, ow);
                        if w0 >= w1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for r in h0..h1 {
                            let ih = r * s + kh * d - p;
                            let grow = &gplane[r * ow..(r + 1) * ow];
                            let in_row = &in_plane[ih * w..(ih + 1) * w];
                            if s == 1 {
                                let iw0 = w0 + kw * d - p;
                                let len = w1 - w0;
                                acc += grow[w0..w1]
                                    .iter()
                                    .zip(&in_row[iw0..iw0 + len])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for (cc, o) in grow[w0..w1].iter().enumerate() {
                                    acc += o * in_row[(w0 + cc) * s + kw * d - p];
                                }
                            }
                        }
                        dst[(icl * g.kernel_h + kh) * g.kernel_w + kw] += acc;
                    }
                }
            }
        }
    });
    Tensor::new(g.weight_shape().to_vec(), out)
}
