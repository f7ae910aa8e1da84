//! Stem, stacked cells and classifier; the training step with spectral
//! adjustment; rank-table collection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::ConvGeometry;
use crate::nn::layers::{BatchNorm2d, Conv2d, Linear};
use crate::nn::optim::{clip_grad_norm, sgd_momentum_step, TrainHyper};
use crate::nn::params::ParamStore;
use crate::nn::tape::{accuracy, Tape, Var};
use crate::rank_table::{CellRank, RankTable};
use crate::spectral::{stable_rank, ConvHandle, SpectralConfig};
use crate::supernet::cell::{Cell, CellInputs, CellPlan, CellType};
use crate::supernet::ops::{LayerBuilder, OperatorKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    /// Number of stacked cells.
    pub cells: usize,
    /// Nodes per cell: two inputs, the intermediates and the output.
    pub nodes: usize,
    /// Channels of the first cell.
    pub channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: (usize, usize),
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            cells: 8,
            nodes: 7,
            channels: 16,
            num_classes: 10,
            input_channels: 3,
            input_size: (32, 32),
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 4 {
            return Err(Error::Argument(format!("a cell needs at least 4 nodes, got {}", self.nodes)));
        }
        if self.cells == 0 || self.channels == 0 || self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Argument(format!("cells, channels and classes must be positive: {self:?}")));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Argument("input size must be positive".into()));
        }
        Ok(())
    }

    /// Indices of the reduction cells, at one and two thirds of the depth.
    pub fn reduction_cells(&self) -> [usize; 2] {
        [self.cells / 3, 2 * self.cells / 3]
    }

    pub fn cell_type(&self, index: usize) -> CellType {
        if self.reduction_cells().contains(&index) {
            CellType::Reduce
        } else {
            CellType::Normal
        }
    }

    pub fn intermediate_nodes(&self) -> usize {
        self.nodes - 3
    }

    /// Edges per cell: node `j` has `j` predecessors.
    pub fn edges_per_cell(&self) -> usize {
        (2..self.nodes - 1).sum()
    }
}

/// Loss and accuracy of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// A stem, `cells` stacked cells and a linear classifier. Built either as
/// the over-parameterized supernet (every edge carries every operator,
/// convolutions are spectrally constrained) or as a discrete network.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: SupernetConfig,
    store: ParamStore,
    handles: Vec<ConvHandle>,
    stem: Conv2d,
    stem_handle: usize,
    stem_bn: BatchNorm2d,
    cells: Vec<Cell>,
    classifier: Linear,
    constrained: bool,
    step: u64,
    adjusted_at: Option<u64>,
    pub epoch: usize,
}

impl Network {
    /// Over-parameterized network with all operators on all edges.
    pub fn supernet(cfg: &SupernetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let plan = CellPlan::full(cfg.nodes);
        Self::build(cfg, &plan, &plan, true, seed)
    }

    /// Network with fixed per-type cell plans and no spectral constraint.
    pub fn discrete(cfg: &SupernetConfig, normal: &CellPlan, reduce: &CellPlan, seed: u64) -> Result<Self> {
        cfg.validate()?;
        for plan in [normal, reduce] {
            if plan.node_count() != cfg.nodes {
                return Err(Error::Argument(format!(
                    "cell plan has {} nodes, config expects {}",
                    plan.node_count(),
                    cfg.nodes
                )));
            }
        }
        Self::build(cfg, normal, reduce, false, seed)
    }

    fn build(cfg: &SupernetConfig, normal: &CellPlan, reduce: &CellPlan, constrained: bool, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut handles = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = LayerBuilder {
            store: &mut store,
            handles: &mut handles,
            rng: &mut rng,
        };
        let stem_channels = 3 * cfg.channels;
        let stem_geom = ConvGeometry::new(cfg.input_channels, stem_channels, 3).padding(1);
        let (stem, stem_handle, stem_hw) = b.conv("stem.conv", stem_geom, cfg.input_size)?;
        let stem_bn = b.bn("stem.bn", stem_channels)?;

        let (mut c_pp, mut c_p) = (stem_channels, stem_channels);
        let (mut hw_pp, mut hw_p) = (stem_hw, stem_hw);
        let mut channels = cfg.channels;
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(cfg.cells);
        for index in 0..cfg.cells {
            let cell_type = cfg.cell_type(index);
            if cell_type == CellType::Reduce {
                channels *= 2;
            }
            let plan = match cell_type {
                CellType::Normal => normal,
                CellType::Reduce => reduce,
            };
            let inputs = CellInputs {
                c_prev_prev: c_pp,
                c_prev: c_p,
                hw_prev_prev: hw_pp,
                hw_prev: hw_p,
                reduction_prev,
            };
            let cell = Cell::build(&mut b, index, cell_type, channels, inputs, plan)?;
            c_pp = c_p;
            c_p = cell.output_channels();
            hw_pp = hw_p;
            hw_p = cell.output_hw;
            reduction_prev = cell_type == CellType::Reduce;
            cells.push(cell);
        }
        let classifier = Linear::new(b.store, "classifier", c_p, cfg.num_classes, b.rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            handles,
            stem,
            stem_handle,
            stem_bn,
            cells,
            classifier,
            constrained,
            step: 0,
            adjusted_at: None,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn handles(&self) -> &[ConvHandle] {
        &self.handles
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [Cell] {
        &mut self.cells
    }

    pub fn stem_handle(&self) -> usize {
        self.stem_handle
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Handles belonging to candidate operators of cell `index`.
    pub fn op_handles(&self, index: usize) -> Vec<usize> {
        self.cells[index]
            .edges()
            .flat_map(|e| e.ops.iter().flat_map(|o| o.conv_handles()))
            .collect()
    }

    /// Rescales every registered convolution to the target spectral norm.
    /// Must run before each constrained forward pass.
    pub fn adjust_spectral_norms(&mut self, cfg: &SpectralConfig) -> Result<()> {
        for h in &mut self.handles {
            let w = self.store.value_mut(h.param);
            h.adjust(w, cfg).map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("{}: {m}", self.store.name(h.param))),
                other => other,
            })?;
        }
        self.adjusted_at = Some(self.step);
        Ok(())
    }

    /// Continues each handle's warm-started power iteration for `iterations`
    /// more steps and returns the new estimates.
    pub fn reestimate_spectral_norms(&mut self, iterations: usize) -> Result<Vec<f64>> {
        let store = &self.store;
        self.handles
            .par_iter_mut()
            .map(|h| h.power_iteration(store.value(h.param), iterations))
            .collect()
    }

    /// Cold-start estimates with a fresh seeded vector per handle.
    pub fn cold_spectral_norms(&self, iterations: usize, seed: u64) -> Result<Vec<f64>> {
        let store = &self.store;
        self.handles
            .par_iter()
            .map(|h| {
                let mut probe = h.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                probe.restore(
                    crate::spectral::random_unit_vector(h.geom.in_channels, h.input_hw, &mut rng),
                    0.0,
                )?;
                probe.power_iteration(store.value(h.param), iterations)
            })
            .collect()
    }

    /// Records the forward pass and returns the logits node.
    pub fn forward(&mut self, tape: &mut Tape, images: &Tensor, training: bool) -> Result<Var> {
        if self.constrained && self.adjusted_at != Some(self.step) {
            return Err(Error::State(format!(
                "spectral norms not adjusted before forward pass at step {}",
                self.step
            )));
        }
        let (_, c, h, w) = images.nchw()?;
        if c != self.cfg.input_channels || (h, w) != self.cfg.input_size {
            return Err(Error::dim(format!(
                "network expects [_, {}, {}, {}] images, got {:?}",
                self.cfg.input_channels,
                self.cfg.input_size.0,
                self.cfg.input_size.1,
                images.shape()
            )));
        }
        let Self {
            store,
            stem,
            stem_bn,
            cells,
            classifier,
            ..
        } = self;
        let x = tape.input(images.clone());
        let x = stem.forward(tape, store, x)?;
        let x = stem_bn.forward(tape, store, x, training)?;
        let (mut s0, mut s1) = (x, x);
        for cell in cells.iter_mut() {
            let out = cell.forward(tape, store, s0, s1, training)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = tape.global_avg_pool(s1)?;
        classifier.forward(tape, store, pooled)
    }

    /// Forward pass plus back-propagation; gradients land in the store.
    pub fn loss_and_grad(&mut self, images: &Tensor, labels: &[usize], training: bool) -> Result<BatchStats> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, images, training)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            let culprit = tape
                .first_non_finite(&self.store)
                .unwrap_or_else(|| "the loss".to_string());
            return Err(Error::NonFinite(culprit));
        }
        tape.backward(loss, &mut self.store)?;
        Ok(BatchStats {
            loss: value,
            accuracy: accuracy(tape.value(logits), labels),
        })
    }

    /// One optimization step: adjust (when constrained), forward, backward,
    /// momentum SGD.
    pub fn train_step(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        lr: f64,
        hyper: &TrainHyper,
        spectral: Option<&SpectralConfig>,
        grad_clip: Option<f64>,
    ) -> Result<BatchStats> {
        if self.constrained {
            let cfg = spectral.ok_or_else(|| Error::State("constrained network trained without a spectral config".into()))?;
            self.adjust_spectral_norms(cfg)?;
        }
        let stats = self.loss_and_grad(images, labels, true)?;
        if let Some(max) = grad_clip {
            clip_grad_norm(&mut self.store, max);
        }
        sgd_momentum_step(&mut self.store, lr, hyper);
        self.step += 1;
        Ok(stats)
    }

    /// Loss and accuracy with frozen batch-norm statistics.
    pub fn evaluate(&mut self, images: &Tensor, labels: &[usize]) -> Result<BatchStats> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, images, false)?;
        let loss = tape.cross_entropy(logits, labels)?;
        Ok(BatchStats {
            loss: tape.value(loss).data()[0],
            accuracy: accuracy(tape.value(logits), labels),
        })
    }

    /// Inference logits with frozen batch-norm statistics.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, images, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean stable rank of every operator's last convolution, per cell type
    /// and edge.
    pub fn collect_rank_table(&self, cfg: &SpectralConfig) -> Result<RankTable> {
        let mut jobs = Vec::new();
        for cell in &self.cells {
            for edge in cell.edges() {
                for op in &edge.ops {
                    jobs.push((cell.cell_type, cell.index, edge.from, edge.to, op.kind, op.fin_handle()));
                }
            }
        }
        let results: Vec<CellRank> = jobs
            .par_iter()
            .map(|&(_, cell, _, _, _, handle)| {
                let h = &self.handles[handle];
                match stable_rank(&h.geom, self.store.value(h.param), h.input_hw, cfg) {
                    Ok(r) => Ok(CellRank {
                        cell,
                        rank: Some(r.rank),
                        sigma: r.sigma,
                        frobenius: r.frobenius,
                    }),
                    Err(Error::Degenerate(_)) => Ok(CellRank {
                        cell,
                        rank: None,
                        sigma: 0.0,
                        frobenius: 0.0,
                    }),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let mut table = RankTable::empty(self.cfg.nodes, cfg);
        for (job, rank) in jobs.iter().zip(results) {
            let (cell_type, _, from, to, kind, _) = *job;
            table.push_cell_rank(cell_type, (from, to), kind, rank)?;
        }
        table.finalize()?;
        Ok(table)
    }

    pub(crate) fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        let mut out = vec![&self.stem_bn];
        for c in &self.cells {
            out.extend(c.batch_norms());
        }
        out
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = vec![&mut self.stem_bn];
        for c in &mut self.cells {
            out.extend(c.batch_norms_mut());
        }
        out
    }

    pub(crate) fn step_state(&self) -> (u64, Option<u64>) {
        (self.step, self.adjusted_at)
    }

    pub(crate) fn set_step_state(&mut self, step: u64, adjusted_at: Option<u64>) {
        self.step = step;
        self.adjusted_at = adjusted_at;
    }

    pub(crate) fn handles_mut(&mut self) -> &mut [ConvHandle] {
        &mut self.handles
    }

    /// Kinds present on edge `(from, to)` of cell `index`.
    pub fn edge_kinds(&self, index: usize, from: usize, to: usize) -> Vec<OperatorKind> {
        self.cells[index]
            .edge(from, to)
            .map(|e| e.ops.iter().map(|o| o.kind).collect())
            .unwrap_or_default()
    }
}
