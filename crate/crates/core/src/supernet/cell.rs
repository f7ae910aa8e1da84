//! DAG cells: two preprocessed inputs, intermediate nodes fed by edges from
//! every earlier node, output = channel concatenation of the intermediates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::BatchNorm2d;
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::supernet::ops::{LayerBuilder, OpInstance, OperatorKind, Preprocess};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub const ALL: [CellType; 2] = [CellType::Normal, CellType::Reduce];

    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Edges `(i, j)` of a cell with `nodes` nodes, ordered by target then source.
pub fn cell_edges(nodes: usize) -> Vec<(usize, usize)> {
    (2..nodes.saturating_sub(1))
        .flat_map(|j| (0..j).map(move |i| (i, j)))
        .collect()
}

/// For one cell type: per intermediate node, the incoming edges and the
/// operators they carry.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPlan {
    pub nodes: Vec<Vec<(usize, Vec<OperatorKind>)>>,
}

impl CellPlan {
    /// Every predecessor, every operator.
    pub fn full(nodes: usize) -> Self {
        Self {
            nodes: (2..nodes - 1)
                .map(|j| (0..j).map(|i| (i, OperatorKind::ALL.to_vec())).collect())
                .collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() + 3
    }
}

/// Edge `i -> j` holding its candidate operators; the output is their sum
/// with unit, non-learnable weights.
#[derive(Debug, Clone)]
pub struct MixedEdge {
    pub from: usize,
    pub to: usize,
    pub ops: Vec<OpInstance>,
}

impl MixedEdge {
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.ops.len());
        for op in &mut self.ops {
            outs.push(op.forward(tape, store, x, training)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.add(&outs)
    }

    pub fn op(&self, kind: OperatorKind) -> Option<&OpInstance> {
        self.ops.iter().find(|o| o.kind == kind)
    }

    pub fn op_mut(&mut self, kind: OperatorKind) -> Option<&mut OpInstance> {
        self.ops.iter_mut().find(|o| o.kind == kind)
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub index: usize,
    pub cell_type: CellType,
    pub channels: usize,
    pub output_hw: (usize, usize),
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    /// Edges grouped by target node, `node_edges[k]` feeding node `k + 2`.
    pub node_edges: Vec<Vec<MixedEdge>>,
}

pub(crate) struct CellInputs {
    pub c_prev_prev: usize,
    pub c_prev: usize,
    pub hw_prev_prev: (usize, usize),
    pub hw_prev: (usize, usize),
    pub reduction_prev: bool,
}

impl Cell {
    pub(crate) fn build(
        b: &mut LayerBuilder<'_>,
        index: usize,
        cell_type: CellType,
        channels: usize,
        inputs: CellInputs,
        plan: &CellPlan,
    ) -> Result<Self> {
        let prefix = format!("cell{index}");
        let (pre0, hw0) = if inputs.reduction_prev {
            Preprocess::factorized_reduce(b, &format!("{prefix}.pre0"), inputs.c_prev_prev, channels, inputs.hw_prev_prev)?
        } else {
            Preprocess::relu_conv_bn(b, &format!("{prefix}.pre0"), inputs.c_prev_prev, channels, inputs.hw_prev_prev)?
        };
        let (pre1, hw1) = Preprocess::relu_conv_bn(b, &format!("{prefix}.pre1"), inputs.c_prev, channels, inputs.hw_prev)?;
        if hw0 != hw1 {
            return Err(Error::dim(format!(
                "cell {index}: preprocessed inputs disagree in size ({hw0:?} vs {hw1:?})"
            )));
        }
        let reduce = cell_type == CellType::Reduce;
        if reduce && (hw1.0 % 2 != 0 || hw1.1 % 2 != 0) {
            return Err(Error::Argument(format!(
                "reduction cell {index} needs an even input size, got {hw1:?}"
            )));
        }
        let output_hw = if reduce { (hw1.0 / 2, hw1.1 / 2) } else { hw1 };
        let mut node_edges = Vec::with_capacity(plan.nodes.len());
        for (k, edges) in plan.nodes.iter().enumerate() {
            let j = k + 2;
            let mut built = Vec::with_capacity(edges.len());
            for (i, kinds) in edges {
                let i = *i;
                if i >= j {
                    return Err(Error::Argument(format!("edge {i}->{j} does not point forward")));
                }
                let (stride, hw_in) = if reduce && i < 2 { (2, hw1) } else { (1, output_hw) };
                let mut ops = Vec::with_capacity(kinds.len());
                for &kind in kinds {
                    let (op, out) = OpInstance::build(b, &format!("{prefix}.e{i}_{j}.{kind}"), kind, channels, stride, hw_in)?;
                    if out != output_hw {
                        return Err(Error::dim(format!(
                            "{kind} on edge {i}->{j} of cell {index} yields {out:?}, expected {output_hw:?}"
                        )));
                    }
                    ops.push(op);
                }
                built.push(MixedEdge { from: i, to: j, ops });
            }
            node_edges.push(built);
        }
        Ok(Self {
            index,
            cell_type,
            channels,
            output_hw,
            pre0,
            pre1,
            node_edges,
        })
    }

    pub fn intermediate_nodes(&self) -> usize {
        self.node_edges.len()
    }

    pub fn output_channels(&self) -> usize {
        self.channels * self.intermediate_nodes()
    }

    pub fn edges(&self) -> impl Iterator<Item = &MixedEdge> {
        self.node_edges.iter().flatten()
    }

    pub fn edges_mut(&mut self) -> impl Iterator<Item = &mut MixedEdge> {
        self.node_edges.iter_mut().flatten()
    }

    pub fn edge(&self, from: usize, to: usize) -> Option<&MixedEdge> {
        self.edges().find(|e| e.from == from && e.to == to)
    }

    pub fn edge_mut(&mut self, from: usize, to: usize) -> Option<&mut MixedEdge> {
        self.edges_mut().find(|e| e.from == from && e.to == to)
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        s0: Var,
        s1: Var,
        training: bool,
    ) -> Result<Var> {
        let s0 = self.pre0.forward(tape, store, s0, training)?;
        let s1 = self.pre1.forward(tape, store, s1, training)?;
        let mut states = vec![s0, s1];
        let batch = tape.value(s1).dim(0);
        let expected = [batch, self.channels, self.output_hw.0, self.output_hw.1];
        for edges in &mut self.node_edges {
            let mut incoming = Vec::with_capacity(edges.len());
            for edge in edges.iter_mut() {
                incoming.push(edge.forward(tape, store, states[edge.from], training)?);
            }
            let node = if incoming.len() == 1 { incoming[0] } else { tape.add(&incoming)? };
            if tape.value(node).shape() != expected {
                return Err(Error::dim(format!(
                    "cell {} node {} has shape {:?}, expected {expected:?}",
                    self.index,
                    states.len(),
                    tape.value(node).shape()
                )));
            }
            states.push(node);
        }
        tape.concat(&states[2..])
    }

    pub(crate) fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        let mut out = self.pre0.batch_norms();
        out.extend(self.pre1.batch_norms());
        for e in self.edges() {
            for op in &e.ops {
                out.extend(op.blocks.iter().map(|b| &b.bn));
            }
        }
        out
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = self.pre0.batch_norms_mut();
        out.extend(self.pre1.batch_norms_mut());
        for edges in &mut self.node_edges {
            for e in edges {
                for op in &mut e.ops {
                    out.extend(op.blocks.iter_mut().map(|b| &mut b.bn));
                }
            }
        }
        out
    }
}
