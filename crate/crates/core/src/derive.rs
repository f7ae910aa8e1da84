//! Discrete architecture from a rank table.
//!
//! Each edge keeps the operator with the smallest averaged stable rank, and
//! each intermediate node keeps its two strongest incoming edges, where an
//! edge's strength is the negated smallest rank among its operators.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank_table::RankTable;
use crate::supernet::cell::{CellPlan, CellType};
use crate::supernet::ops::OperatorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SelectionMode {
    #[default]
    #[serde(rename = "min")]
    MinStableRank,
    /// Ablation: prefer the largest stable rank instead.
    #[serde(rename = "max")]
    MaxStableRank,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::MinStableRank => "min",
            SelectionMode::MaxStableRank => "max",
        }
    }

    /// Score where larger is better; flagged entries score worst.
    fn score(self, rank: Option<f64>) -> f64 {
        match (self, rank) {
            (SelectionMode::MinStableRank, Some(r)) => -r,
            (SelectionMode::MaxStableRank, Some(r)) => r,
            (_, None) => f64::NEG_INFINITY,
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(SelectionMode::MinStableRank),
            "max" => Ok(SelectionMode::MaxStableRank),
            _ => Err(Error::Argument(format!("unknown selection mode {s:?}, expected min or max"))),
        }
    }
}

/// One retained input of an intermediate node.
pub type Choice = (OperatorKind, usize);

/// Two `(operator, predecessor)` pairs per intermediate node, per cell type,
/// stored strongest edge first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub mode: SelectionMode,
    pub normal: Vec<[Choice; 2]>,
    pub reduce: Vec<[Choice; 2]>,
}

impl Genotype {
    /// Total node count of the cell (two inputs, intermediates, output).
    pub fn nodes(&self) -> usize {
        self.normal.len() + 3
    }

    pub fn cell(&self, cell_type: CellType) -> &[[Choice; 2]] {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    /// Checks the structural invariants: equal depth for both cell types,
    /// distinct predecessors that precede their node.
    pub fn validate(&self) -> Result<()> {
        if self.normal.is_empty() || self.normal.len() != self.reduce.len() {
            return Err(Error::Argument(format!(
                "genotype needs the same nonzero node count in both cells, got {} normal and {} reduce",
                self.normal.len(),
                self.reduce.len()
            )));
        }
        for cell_type in CellType::ALL {
            for (k, pair) in self.cell(cell_type).iter().enumerate() {
                let j = k + 2;
                let (a, b) = (pair[0].1, pair[1].1);
                if a == b || a >= j || b >= j {
                    return Err(Error::Argument(format!(
                        "{cell_type} node {j}: predecessors {a} and {b} must be distinct and below {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cell_plan(&self, cell_type: CellType) -> CellPlan {
        let mut nodes: Vec<Vec<(usize, Vec<OperatorKind>)>> = self
            .cell(cell_type)
            .iter()
            .map(|pair| pair.iter().map(|&(op, i)| (i, vec![op])).collect())
            .collect();
        for inputs in &mut nodes {
            inputs.sort_by_key(|&(i, _)| i);
        }
        CellPlan { nodes }
    }

    /// Canonical compact JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)
            .map_err(|e| Error::format(source, e.column() as u64, format!("line {}: {e}", e.line())))?;
        g.validate().map_err(|e| Error::format(source, 0, e.to_string()))?;
        Ok(g)
    }
}

fn edge_scores(table: &RankTable, cell_type: CellType, edge: (usize, usize), mode: SelectionMode) -> Result<[f64; 4]> {
    let mut scores = [0.0; 4];
    for op in OperatorKind::ALL {
        scores[op.index()] = mode.score(table.rank(cell_type, edge, op)?);
    }
    if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
        return Err(Error::Derivation(format!(
            "every operator on {cell_type} edge {}->{} is degenerate",
            edge.0, edge.1
        )));
    }
    Ok(scores)
}

/// First index holding the maximum; NaN never wins.
fn first_argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v.partial_cmp(&b) != Some(Ordering::Greater) => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn best_operator(
    table: &RankTable,
    cell_type: CellType,
    edge: (usize, usize),
    mode: SelectionMode,
) -> Result<OperatorKind> {
    let scores = edge_scores(table, cell_type, edge, mode)?;
    let i = first_argmax(scores).expect("at least one finite score");
    Ok(OperatorKind::ALL[i])
}

/// `-min_v R` in Min mode, `max_v R` in Max mode.
pub fn edge_strength(table: &RankTable, cell_type: CellType, edge: (usize, usize), mode: SelectionMode) -> Result<f64> {
    let scores = edge_scores(table, cell_type, edge, mode)?;
    Ok(scores.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// The two strongest predecessors of node `j`, strongest first; ties go to
/// the lower node index.
pub fn select_predecessors(table: &RankTable, cell_type: CellType, j: usize, mode: SelectionMode) -> Result<(usize, usize)> {
    if j < 2 {
        return Err(Error::Argument(format!("node {j} has fewer than two predecessors")));
    }
    let strengths = (0..j)
        .map(|i| edge_strength(table, cell_type, (i, j), mode))
        .collect::<Result<Vec<_>>>()?;
    let first = first_argmax(strengths.iter().copied()).expect("j >= 2");
    let second = first_argmax(
        strengths
            .iter()
            .enumerate()
            .map(|(i, &s)| if i == first { f64::NAN } else { s }),
    )
    .expect("j >= 2");
    Ok((first, second))
}

pub fn derive_genotype(table: &RankTable, mode: SelectionMode) -> Result<Genotype> {
    let derive_cell = |cell_type: CellType| -> Result<Vec<[Choice; 2]>> {
        (2..table.nodes - 1)
            .map(|j| {
                let (a, b) = select_predecessors(table, cell_type, j, mode)?;
                Ok([
                    (best_operator(table, cell_type, (a, j), mode)?, a),
                    (best_operator(table, cell_type, (b, j), mode)?, b),
                ])
            })
            .collect()
    };
    let g = Genotype {
        mode,
        normal: derive_cell(CellType::Normal)?,
        reduce: derive_cell(CellType::Reduce)?,
    };
    g.validate()?;
    Ok(g)
}
