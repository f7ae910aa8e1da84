//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates parameter gradients into a
//! [`ParamStore`].

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_forward, conv2d_transpose_forward, conv2d_weight_grad, ConvGeometry};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Running mean and (unbiased) variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    Add(Vec<Var>),
    Concat(Vec<Var>),
    Crop {
        input: Var,
        offset: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
    Scale(Var, f64),
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Add(_) => "add",
            Op::Concat(_) => "concat",
            Op::Crop { .. } => "crop",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient is reported for it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeometry) -> Result<Var> {
        let y = conv2d_forward(self.value(input), self.value(weight), &geom)?;
        Ok(self.push(
            y,
            Op::Conv {
                input,
                weight,
                geom,
            },
        ))
    }

    /// Per-channel batch normalization of an NCHW tensor. In training mode the
    /// batch statistics are used and `stats` is updated in place.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        training: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.nchw()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c || stats.mean.len() != c {
            return Err(Error::dim(format!(
                "batch norm over {c} channels given gamma/beta/stats of length {}/{}/{}",
                gv.len(),
                bv.len(),
                stats.mean.len()
            )));
        }
        let plane = h * w;
        let m = n * plane;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mu, var) = if training {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += xd[(b * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                let unbiased = if m > 1 { sq / (m - 1) as f64 } else { var };
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mu;
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                (mu, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            mean[ch] = mu;
            inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
        }
        let mut y = vec![0.0; xd.len()];
        let (gd, bd) = (gv.data(), bv.data());
        for b in 0..n {
            for ch in 0..c {
                let k = gd[ch] * inv_std[ch];
                let off = (b * c + ch) * plane;
                for (o, v) in y[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                    *o = k * (v - mean[ch]) + bd[ch];
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self.value(input).map(|v| v.max(0.0));
        self.push(y, Op::Relu(input))
    }

    /// Elementwise sum, accumulated in argument order.
    pub fn add(&mut self, inputs: &[Var]) -> Result<Var> {
        let (first, rest) = inputs
            .split_first()
            .ok_or_else(|| Error::Argument("add of zero tensors".into()))?;
        let mut acc = self.value(*first).clone();
        for v in rest {
            let t = self.value(*v);
            if !t.same_shape(&acc) {
                return Err(Error::dim(format!(
                    "cannot add {:?} to {:?}",
                    t.shape(),
                    acc.shape()
                )));
            }
            acc.axpy(1.0, t);
        }
        Ok(self.push(acc, Op::Add(inputs.to_vec())))
    }

    /// Concatenation of NCHW tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).nchw()?;
        let mut total = 0;
        for v in inputs {
            let (vn, vc, vh, vw) = self.value(*v).nchw()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::dim(format!(
                    "concat of {:?} with {:?}",
                    self.value(*first).shape(),
                    self.value(*v).shape()
                )));
            }
            total += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for v in inputs {
                let t = self.value(*v);
                let c = t.dim(1);
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let y = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.push(y, Op::Concat(inputs.to_vec())))
    }

    /// Drops the first `offset` rows and columns of every plane.
    pub fn crop(&mut self, input: Var, offset: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        if offset >= h || offset >= w {
            return Err(Error::dim(format!("cannot crop {offset} from a {h}x{w} plane")));
        }
        let (oh, ow) = (h - offset, w - offset);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for r in offset..h {
                out.extend_from_slice(&x[p * h * w + r * w + offset..p * h * w + (r + 1) * w]);
            }
        }
        let y = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(y, Op::Crop { input, offset }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        let plane = h * w;
        let x = self.value(input).data();
        let out = (0..n * c)
            .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let y = Tensor::new(vec![n, c], out)?;
        Ok(self.push(y, Op::GlobalAvgPool(input)))
    }

    /// `input [n, in] · weightᵀ [in, out] + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, fin) = match x.shape() {
            &[n, f] => (n, f),
            s => return Err(Error::dim(format!("linear expects [n, features], got {s:?}"))),
        };
        let (fout, win) = match wt.shape() {
            &[o, i] => (o, i),
            s => return Err(Error::dim(format!("linear weight must be 2-d, got {s:?}"))),
        };
        if win != fin || b.len() != fout {
            return Err(Error::dim(format!(
                "linear {fin} -> weight {:?}, bias {:?}",
                wt.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; n * fout];
        for r in 0..n {
            let xr = &x.data()[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &wt.data()[o * fin..(o + 1) * fin];
                out[r * fout + o] = b.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let y = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(
            y,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match z.shape() {
            &[n, k] => (n, k),
            s => return Err(Error::dim(format!("cross entropy expects [n, classes], got {s:?}"))),
        };
        if labels.len() != n || n == 0 {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!("label {l} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + se.ln();
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let probs = Tensor::new(vec![n, k], probs)?;
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn scale(&mut self, input: Var, k: f64) -> Var {
        let y = self.value(input).scaled(k);
        self.push(y, Op::Scale(input, k))
    }

    /// First node whose value contains NaN or infinity, described for diagnostics.
    pub fn first_non_finite(&self, store: &ParamStore) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match n.op {
                Op::Param(id) => format!("parameter {}", store.name(id)),
                ref op => format!("node {i} ({}) of shape {:?}", op.label(), n.value.shape()),
            })
        })
    }

    /// Back-propagates from the scalar `loss`, overwriting every gradient in
    /// `store`; parameters that do not reach the loss end with zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        store.zero_grads();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.get_mut(*id).grad.axpy(1.0, &g),
                Op::Conv {
                    input,
                    weight,
                    geom,
                } => {
                    let x = self.value(*input);
                    let (_, _, h, w) = x.nchw()?;
                    let gw = conv2d_weight_grad(x, &g, geom)?;
                    let gx = conv2d_transpose_forward(&g, self.value(*weight), geom, (h, w))?;
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *input, gx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    training,
                } => {
                    let x = self.value(*input);
                    let (n, c, h, w) = x.nchw()?;
                    let plane = h * w;
                    let m = (n * plane) as f64;
                    let gam = self.value(*gamma).data();
                    let (xd, gd) = (x.data(), g.data());
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ch in 0..c {
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for (dy, v) in gd[off..off + plane].iter().zip(&xd[off..off + plane]) {
                                dbeta[ch] += dy;
                                dgamma[ch] += dy * (v - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    let mut dx = vec![0.0; xd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for ((o, dy), v) in dx[off..off + plane]
                                .iter_mut()
                                .zip(&gd[off..off + plane])
                                .zip(&xd[off..off + plane])
                            {
                                *o = if *training {
                                    let xhat = (v - mean[ch]) * inv_std[ch];
                                    k * (dy - dbeta[ch] / m - xhat * dgamma[ch] / m)
                                } else {
                                    k * dy
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
                Op::Relu(input) => {
                    let x = self.value(*input);
                    let mut gx = g;
                    for (d, v) in gx.data_mut().iter_mut().zip(x.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Add(inputs) => {
                    for v in inputs {
                        accumulate(&mut grads, *v, g.clone());
                    }
                }
                Op::Concat(inputs) => {
                    let (n, _, h, w) = g.nchw()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for v in inputs {
                        let c = self.value(*v).dim(1);
                        let total = g.dim(1);
                        let mut part = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            part.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        offset += c;
                        accumulate(&mut grads, *v, Tensor::new(vec![n, c, h, w], part)?);
                    }
                }
                Op::Crop { input, offset } => {
                    let x = self.value(*input);
                    let (_, _, h, w) = x.nchw()?;
                    let (oh, ow) = (h - offset, w - offset);
                    let mut gx = Tensor::zeros(x.shape());
                    let gxd = gx.data_mut();
                    for (p, src) in g.data().chunks(oh * ow).enumerate() {
                        for r in 0..oh {
                            let dst = p * h * w + (r + offset) * w + offset;
                            gxd[dst..dst + ow].copy_from_slice(&src[r * ow..(r + 1) * ow]);
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::GlobalAvgPool(input) => {
                    let x = self.value(*input);
                    let (_, _, h, w) = x.nchw()?;
                    let plane = h * w;
                    let inv = 1.0 / plane as f64;
                    let mut gx = Vec::with_capacity(x.len());
                    for v in g.data() {
                        gx.extend(std::iter::repeat_n(v * inv, plane));
                    }
                    accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), gx)?);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, wt) = (self.value(*input), self.value(*weight));
                    let (n, fin) = (x.dim(0), x.dim(1));
                    let fout = wt.dim(0);
                    let gd = g.data();
                    let mut gx = vec![0.0; n * fin];
                    let mut gw = vec![0.0; fout * fin];
                    let mut gb = vec![0.0; fout];
                    for r in 0..n {
                        let xr = &x.data()[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let d = gd[r * fout + o];
                            gb[o] += d;
                            let wr = &wt.data()[o * fin..(o + 1) * fin];
                            for f in 0..fin {
                                gx[r * fin + f] += d * wr[f];
                                gw[o * fin + f] += d * xr[f];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::new(vec![n, fin], gx)?);
                    accumulate(&mut grads, *weight, Tensor::new(vec![fout, fin], gw)?);
                    accumulate(&mut grads, *bias, Tensor::new(vec![fout], gb)?);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.data()[0] / labels.len() as f64;
                    let k = probs.dim(1);
                    let mut gz = probs.scaled(scale);
                    for (r, &l) in labels.iter().enumerate() {
                        gz.data_mut()[r * k + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, gz);
                }
                Op::Sum(input) => {
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, Tensor::full(&shape, g.data()[0]));
                }
                Op::Scale(input, k) => accumulate(&mut grads, *input, g.scaled(*k)),
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.dim(1);
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == l
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}
