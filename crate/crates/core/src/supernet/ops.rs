//! Candidate operators and the input preprocessing blocks of a cell.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::ConvGeometry;
use crate::nn::layers::{BatchNorm2d, Conv2d};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::spectral::ConvHandle;

/// The four convolutional candidates, in tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    #[serde(rename = "sep3")]
    SepConv3x3,
    #[serde(rename = "sep5")]
    SepConv5x5,
    #[serde(rename = "dil3")]
    DilConv3x3,
    #[serde(rename = "dil5")]
    DilConv5x5,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::SepConv3x3,
        OperatorKind::SepConv5x5,
        OperatorKind::DilConv3x3,
        OperatorKind::DilConv5x5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::SepConv3x3 => "sep3",
            OperatorKind::SepConv5x5 => "sep5",
            OperatorKind::DilConv3x3 => "dil3",
            OperatorKind::DilConv5x5 => "dil5",
        }
    }

    pub fn kernel(self) -> usize {
        match self {
            OperatorKind::SepConv3x3 | OperatorKind::DilConv3x3 => 3,
            OperatorKind::SepConv5x5 | OperatorKind::DilConv5x5 => 5,
        }
    }

    pub fn is_separable(self) -> bool {
        matches!(self, OperatorKind::SepConv3x3 | OperatorKind::SepConv5x5)
    }

    pub fn dilation(self) -> usize {
        if self.is_separable() {
            1
        } else {
            2
        }
    }

    /// Padding that preserves spatial size at stride 1.
    pub fn padding(self) -> usize {
        self.dilation() * (self.kernel() - 1) / 2
    }

    /// Convolutions per instance: two (depthwise, pointwise) blocks for
    /// separable convolutions, one for dilated ones.
    pub fn conv_count(self) -> usize {
        if self.is_separable() {
            4
        } else {
            2
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown operator {s:?}")))
    }
}

/// Creates layers and registers every convolution for spectral control.
pub(crate) struct LayerBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub handles: &'a mut Vec<ConvHandle>,
    pub rng: &'a mut ChaCha8Rng,
}

impl LayerBuilder<'_> {
    /// Convolution plus its handle index, at input size `hw`.
    pub fn conv(&mut self, name: &str, geom: ConvGeometry, hw: (usize, usize)) -> Result<(Conv2d, usize, (usize, usize))> {
        let out_hw = geom.output_hw(hw.0, hw.1)?;
        let conv = Conv2d::new(self.store, name, geom, self.rng)?;
        self.handles.push(ConvHandle::new(conv.weight, geom, hw, self.rng));
        Ok((conv, self.handles.len() - 1, out_hw))
    }

    pub fn bn(&mut self, name: &str, channels: usize) -> Result<BatchNorm2d> {
        BatchNorm2d::new(self.store, name, channels)
    }
}

/// ReLU, depthwise k×k, pointwise 1×1, batch norm.
#[derive(Debug, Clone)]
pub struct SepBlock {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub bn: BatchNorm2d,
    pub depthwise_handle: usize,
    pub pointwise_handle: usize,
}

impl SepBlock {
    fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let x = tape.relu(x);
        let x = self.depthwise.forward(tape, store, x)?;
        let x = self.pointwise.forward(tape, store, x)?;
        self.bn.forward(tape, store, x, training)
    }
}

/// One candidate operator on one edge.
#[derive(Debug, Clone)]
pub struct OpInstance {
    pub kind: OperatorKind,
    pub stride: usize,
    pub blocks: Vec<SepBlock>,
}

impl OpInstance {
    pub(crate) fn build(
        b: &mut LayerBuilder<'_>,
        prefix: &str,
        kind: OperatorKind,
        channels: usize,
        stride: usize,
        hw: (usize, usize),
    ) -> Result<(Self, (usize, usize))> {
        let k = kind.kernel();
        let n_blocks = if kind.is_separable() { 2 } else { 1 };
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut cur = hw;
        for blk in 0..n_blocks {
            let s = if blk == 0 { stride } else { 1 };
            let dw_geom = ConvGeometry::new(channels, channels, k)
                .stride(s)
                .padding(kind.padding())
                .dilation(kind.dilation())
                .groups(channels);
            let (depthwise, depthwise_handle, mid) = b.conv(&format!("{prefix}.b{blk}.dw"), dw_geom, cur)?;
            let pw_geom = ConvGeometry::new(channels, channels, 1);
            let (pointwise, pointwise_handle, out) = b.conv(&format!("{prefix}.b{blk}.pw"), pw_geom, mid)?;
            let bn = b.bn(&format!("{prefix}.b{blk}.bn"), channels)?;
            blocks.push(SepBlock {
                depthwise,
                pointwise,
                bn,
                depthwise_handle,
                pointwise_handle,
            });
            cur = out;
        }
        Ok((Self { kind, stride, blocks }, cur))
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let mut x = x;
        for blk in &mut self.blocks {
            x = blk.forward(tape, store, x, training)?;
        }
        Ok(x)
    }

    /// Handle indices of every convolution, in forward order.
    pub fn conv_handles(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .flat_map(|b| [b.depthwise_handle, b.pointwise_handle])
            .collect()
    }

    /// Handle of the last convolution, whose stable rank scores the operator.
    pub fn fin_handle(&self) -> usize {
        self.blocks.last().expect("operator has blocks").pointwise_handle
    }

    /// Batch norm closing the operator.
    pub fn final_bn_mut(&mut self) -> &mut BatchNorm2d {
        &mut self.blocks.last_mut().expect("operator has blocks").bn
    }
}

/// Aligns a cell input with the cell's channel count (and, after a
/// reduction, its spatial size).
#[derive(Debug, Clone)]
pub enum Preprocess {
    ReluConvBn {
        conv: Conv2d,
        handle: usize,
        bn: BatchNorm2d,
    },
    /// Two stride-2 1×1 convolutions, the second offset by one pixel,
    /// concatenated along channels.
    FactorizedReduce {
        conv_a: Conv2d,
        conv_b: Conv2d,
        handle_a: usize,
        handle_b: usize,
        bn: BatchNorm2d,
    },
}

impl Preprocess {
    pub(crate) fn relu_conv_bn(
        b: &mut LayerBuilder<'_>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        hw: (usize, usize),
    ) -> Result<(Self, (usize, usize))> {
        let (conv, handle, out) = b.conv(&format!("{prefix}.conv"), ConvGeometry::new(c_in, c_out, 1), hw)?;
        let bn = b.bn(&format!("{prefix}.bn"), c_out)?;
        Ok((Preprocess::ReluConvBn { conv, handle, bn }, out))
    }

    pub(crate) fn factorized_reduce(
        b: &mut LayerBuilder<'_>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        (h, w): (usize, usize),
    ) -> Result<(Self, (usize, usize))> {
        if !c_out.is_multiple_of(2) || !h.is_multiple_of(2) || !w.is_multiple_of(2) || h < 2 || w < 2 {
            return Err(Error::Argument(format!(
                "factorized reduce needs even channels and spatial size, got {c_out} channels at {h}x{w}"
            )));
        }
        let geom = ConvGeometry::new(c_in, c_out / 2, 1).stride(2);
        let (conv_a, handle_a, out) = b.conv(&format!("{prefix}.conv_a"), geom, (h, w))?;
        let (conv_b, handle_b, _) = b.conv(&format!("{prefix}.conv_b"), geom, (h - 1, w - 1))?;
        let bn = b.bn(&format!("{prefix}.bn"), c_out)?;
        Ok((
            Preprocess::FactorizedReduce {
                conv_a,
                conv_b,
                handle_a,
                handle_b,
                bn,
            },
            out,
        ))
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        match self {
            Preprocess::ReluConvBn { conv, bn, .. } => {
                let x = tape.relu(x);
                let x = conv.forward(tape, store, x)?;
                bn.forward(tape, store, x, training)
            }
            Preprocess::FactorizedReduce { conv_a, conv_b, bn, .. } => {
                let x = tape.relu(x);
                let a = conv_a.forward(tape, store, x)?;
                let shifted = tape.crop(x, 1)?;
                let b = conv_b.forward(tape, store, shifted)?;
                let y = tape.concat(&[a, b])?;
                bn.forward(tape, store, y, training)
            }
        }
    }

    pub fn handles(&self) -> Vec<usize> {
        match self {
            Preprocess::ReluConvBn { handle, .. } => vec![*handle],
            Preprocess::FactorizedReduce { handle_a, handle_b, .. } => vec![*handle_a, *handle_b],
        }
    }

    pub(crate) fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        match self {
            Preprocess::ReluConvBn { bn, .. } | Preprocess::FactorizedReduce { bn, .. } => vec![bn],
        }
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        match self {
            Preprocess::ReluConvBn { bn, .. } | Preprocess::FactorizedReduce { bn, .. } => vec![bn],
        }
    }
}
