//! Averaged stable ranks of every operator's last convolution, indexed by
//! cell type, edge and operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{FrobeniusMode, SpectralConfig};
use crate::supernet::cell::{cell_edges, CellType};
use crate::supernet::ops::OperatorKind;

/// Stable rank of one operator's last convolution in one cell.
/// `rank == None` marks a degenerate (all-zero) convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRank {
    pub cell: usize,
    pub rank: Option<f64>,
    pub sigma: f64,
    pub frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub cell_type: CellType,
    pub from: usize,
    pub to: usize,
    pub op: OperatorKind,
    /// Mean over cells of this type; `None` when any cell was degenerate.
    pub mean: Option<f64>,
    pub cells: Vec<CellRank>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub nodes: usize,
    pub epoch: Option<usize>,
    pub seed: u64,
    pub rank_iterations: usize,
    pub frobenius: FrobeniusMode,
    entries: Vec<RankEntry>,
}

fn edge_index(from: usize, to: usize) -> usize {
    // edges are ordered by target j, then source i; j has j sources
    (to * (to - 1)) / 2 - 1 + from
}

impl RankTable {
    /// Table with every entry present and no cell ranks yet.
    pub fn empty(nodes: usize, cfg: &SpectralConfig) -> Self {
        let mut entries = Vec::new();
        for cell_type in CellType::ALL {
            for (from, to) in cell_edges(nodes) {
                for op in OperatorKind::ALL {
                    entries.push(RankEntry {
                        cell_type,
                        from,
                        to,
                        op,
                        mean: None,
                        cells: Vec::new(),
                    });
                }
            }
        }
        Self {
            nodes,
            epoch: None,
            seed: cfg.seed,
            rank_iterations: cfg.rank_iterations,
            frobenius: cfg.frobenius,
            entries,
        }
    }

    /// Table filled directly with mean values (`None` = degenerate).
    pub fn from_fn(nodes: usize, mut value: impl FnMut(CellType, (usize, usize), OperatorKind) -> Option<f64>) -> Self {
        let mut t = Self::empty(nodes, &SpectralConfig::default());
        for e in &mut t.entries {
            e.mean = value(e.cell_type, (e.from, e.to), e.op);
        }
        t
    }

    fn position(&self, cell_type: CellType, (from, to): (usize, usize), op: OperatorKind) -> Result<usize> {
        if to < 2 || to + 1 >= self.nodes || from >= to {
            return Err(Error::Argument(format!(
                "edge {from}->{to} does not exist in a {}-node cell",
                self.nodes
            )));
        }
        let per_type = self.edge_count() * OperatorKind::ALL.len();
        let t = match cell_type {
            CellType::Normal => 0,
            CellType::Reduce => 1,
        };
        Ok(t * per_type + edge_index(from, to) * OperatorKind::ALL.len() + op.index())
    }

    pub fn edge_count(&self) -> usize {
        (2..self.nodes - 1).sum()
    }

    pub fn entry(&self, cell_type: CellType, edge: (usize, usize), op: OperatorKind) -> Result<&RankEntry> {
        let p = self.position(cell_type, edge, op)?;
        Ok(&self.entries[p])
    }

    /// Averaged rank, `None` if flagged degenerate.
    pub fn rank(&self, cell_type: CellType, edge: (usize, usize), op: OperatorKind) -> Result<Option<f64>> {
        Ok(self.entry(cell_type, edge, op)?.mean)
    }

    pub fn set_rank(&mut self, cell_type: CellType, edge: (usize, usize), op: OperatorKind, value: Option<f64>) -> Result<()> {
        let p = self.position(cell_type, edge, op)?;
        self.entries[p].mean = value;
        Ok(())
    }

    pub fn entries(&self) -> &[RankEntry] {
        &self.entries
    }

    pub(crate) fn push_cell_rank(
        &mut self,
        cell_type: CellType,
        edge: (usize, usize),
        op: OperatorKind,
        rank: CellRank,
    ) -> Result<()> {
        let p = self.position(cell_type, edge, op)?;
        self.entries[p].cells.push(rank);
        Ok(())
    }

    /// Averages the per-cell ranks; errors if some entry saw no cell.
    pub(crate) fn finalize(&mut self) -> Result<()> {
        for e in &mut self.entries {
            if e.cells.is_empty() {
                return Err(Error::State(format!(
                    "no cell contributed to {} edge {}->{} {}",
                    e.cell_type, e.from, e.to, e.op
                )));
            }
            e.mean = e
                .cells
                .iter()
                .map(|c| c.rank)
                .sum::<Option<f64>>()
                .map(|s| s / e.cells.len() as f64);
        }
        Ok(())
    }

    /// Applies `f` to every non-flagged mean.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut t = self.clone();
        for e in &mut t.entries {
            e.mean = e.mean.map(&f);
        }
        t
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("rank table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let t: RankTable = serde_json::from_str(text)
            .map_err(|e| Error::format(source, e.column() as u64, format!("line {}: {e}", e.line())))?;
        t.check(source)?;
        Ok(t)
    }

    /// Completeness and canonical ordering.
    fn check(&self, source: &str) -> Result<()> {
        if self.nodes < 4 {
            return Err(Error::format(source, 0, format!("cell needs at least 4 nodes, got {}", self.nodes)));
        }
        let reference = Self::empty(self.nodes, &SpectralConfig::default());
        if reference.entries.len() != self.entries.len() {
            return Err(Error::format(
                source,
                0,
                format!("expected {} entries, found {}", reference.entries.len(), self.entries.len()),
            ));
        }
        for (r, e) in reference.entries.iter().zip(&self.entries) {
            if (r.cell_type, r.from, r.to, r.op) != (e.cell_type, e.from, e.to, e.op) {
                return Err(Error::format(
                    source,
                    0,
                    format!(
                        "entry {} {}->{} {} out of canonical order",
                        e.cell_type, e.from, e.to, e.op
                    ),
                ));
            }
            if let Some(v) = e.mean {
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::format(source, 0, format!("invalid stable rank {v}")));
                }
            }
        }
        Ok(())
    }
}
