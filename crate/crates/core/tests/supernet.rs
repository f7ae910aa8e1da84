use msr_core::data::{synth_dataset, BatchIter, SynthSpec};
use msr_core::derive::{best_operator, SelectionMode};
use msr_core::nn::{Tape, TrainHyper};
use msr_core::spectral::{stable_rank, SpectralConfig};
use msr_core::supernet::{cell_edges, CellType, Network, OperatorKind, SupernetConfig};
use msr_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(cells: usize, nodes: usize, channels: usize, hw: usize) -> SupernetConfig {
    SupernetConfig {
        cells,
        nodes,
        channels,
        num_classes: 4,
        input_channels: 3,
        input_size: (hw, hw),
    }
}

#[test]
fn default_search_space_counts() {
    let cfg = SupernetConfig::default();
    assert_eq!((cfg.cells, cfg.nodes, cfg.channels), (8, 7, 16));
    assert_eq!(cfg.reduction_cells(), [2, 5]);
    assert_eq!(cfg.edges_per_cell(), 14);
    let net = Network::supernet(&SupernetConfig { input_size: (8, 8), ..cfg }, 0).unwrap();
    let types: Vec<CellType> = net.cells().iter().map(|c| c.cell_type).collect();
    assert_eq!(types.iter().filter(|t| **t == CellType::Normal).count(), 6);
    assert_eq!(types[2], CellType::Reduce);
    assert_eq!(types[5], CellType::Reduce);
    for (k, cell) in net.cells().iter().enumerate() {
        assert_eq!(cell.edges().count(), 14);
        assert_eq!(cell.edges().map(|e| e.ops.len()).sum::<usize>(), 56);
        assert_eq!(net.op_handles(k).len(), 168);
        for e in cell.edges() {
            for op in &e.ops {
                let hs = op.conv_handles();
                assert_eq!(hs.len(), if op.kind.is_separable() { 4 } else { 2 });
                assert_eq!(*hs.last().unwrap(), op.fin_handle());
                let expect_stride = if cell.cell_type == CellType::Reduce && e.from < 2 { 2 } else { 1 };
                assert_eq!(op.stride, expect_stride);
            }
        }
    }
    // channels double and spatial size halves at each reduction
    let chans: Vec<usize> = net.cells().iter().map(|c| c.channels).collect();
    assert_eq!(chans, vec![16, 16, 32, 32, 32, 64, 64, 64]);
    let hw: Vec<usize> = net.cells().iter().map(|c| c.output_hw.0).collect();
    assert_eq!(hw, vec![8, 8, 4, 4, 4, 2, 2, 2]);
    assert!(SupernetConfig { nodes: 3, ..SupernetConfig::default() }.validate().is_err());
}

#[test]
fn forward_requires_adjustment_every_step() {
    let mut net = Network::supernet(&small(2, 4, 4, 8), 1).unwrap();
    let x = Tensor::zeros(&[2, 3, 8, 8]);
    let mut tape = Tape::new();
    assert!(matches!(net.forward(&mut tape, &x, true), Err(Error::State(_))));
    let cfg = SpectralConfig::default();
    net.adjust_spectral_norms(&cfg).unwrap();
    let logits = net.predict(&x).unwrap();
    assert_eq!(logits.shape(), &[2, 4]);
    assert!(logits.is_finite());
    net.train_step(&x, &[0, 1], 0.01, &TrainHyper::default(), Some(&cfg), None).unwrap();
    assert!(matches!(net.predict(&x), Err(Error::State(_))));
    assert!(matches!(
        net.train_step(&x, &[0, 1], 0.01, &TrainHyper::default(), None, None),
        Err(Error::State(_))
    ));
    let bad = Tensor::zeros(&[2, 3, 6, 6]);
    net.adjust_spectral_norms(&cfg).unwrap();
    assert!(matches!(net.predict(&bad), Err(Error::Dimension(_))));
}

#[test]
fn mixed_edge_is_the_sum_of_its_operators() {
    let mut net = Network::supernet(&small(3, 5, 4, 8), 2).unwrap();
    net.adjust_spectral_norms(&SpectralConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng);
    let store = net.store().clone();
    let cell = &mut net.cells_mut()[0];
    let edge = cell.edge_mut(1, 3).unwrap();

    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let total = edge.forward(&mut tape, &store, xv, false).unwrap();
    let mut sum = Tensor::zeros(tape.value(total).shape());
    let mut parts = Vec::new();
    for op in &mut edge.ops {
        let y = op.forward(&mut tape, &store, xv, false).unwrap();
        sum.axpy(1.0, tape.value(y));
        parts.push(tape.value(y).clone());
    }
    let total_before = tape.value(total).clone();
    let mut diff = total_before.clone();
    diff.axpy(-1.0, &sum);
    assert!(diff.max_abs() < 1e-12);

    // doubling dil3's last pointwise conv changes only the dil3 summand
    let fin = edge.op(OperatorKind::DilConv3x3).unwrap().fin_handle();
    let pid = net.handles()[fin].param;
    let mut store2 = store.clone();
    store2.value_mut(pid).scale(2.0);
    let edge = net.cells_mut()[0].edge_mut(1, 3).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let total2 = edge.forward(&mut tape, &store2, xv, false).unwrap();
    let mut changed = Vec::new();
    for (k, op) in edge.ops.iter_mut().enumerate() {
        let y = op.forward(&mut tape, &store2, xv, false).unwrap();
        let mut d = tape.value(y).clone();
        d.axpy(-1.0, &parts[k]);
        changed.push(d.max_abs() > 1e-9);
    }
    assert_eq!(changed, vec![false, false, true, false]);
    let mut d = tape.value(total2).clone();
    d.axpy(-1.0, &total_before);
    assert!(d.max_abs() > 1e-9);
}

#[test]
fn zeroing_three_operators_leaves_the_fourth() {
    let mut net = Network::supernet(&small(3, 4, 4, 8), 4).unwrap();
    net.adjust_spectral_norms(&SpectralConfig::default()).unwrap();
    let mut store = net.store().clone();
    let cell = &mut net.cells_mut()[0];
    let edge = cell.edge_mut(0, 2).unwrap();
    // gamma = beta = 0 on the closing batch norm silences an operator
    for op in edge.ops.iter_mut().filter(|o| o.kind != OperatorKind::SepConv5x5) {
        let bn = op.final_bn_mut();
        store.value_mut(bn.gamma).fill(0.0);
        store.value_mut(bn.beta).fill(0.0);
    }
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let total = edge.forward(&mut tape, &store, xv, false).unwrap();
    let only = edge.op_mut(OperatorKind::SepConv5x5).unwrap().forward(&mut tape, &store, xv, false).unwrap();
    let mut d = tape.value(total).clone();
    d.axpy(-1.0, tape.value(only));
    assert!(d.max_abs() < 1e-12);
}

#[test]
fn eval_mode_is_batch_independent() {
    let mut net = Network::supernet(&small(3, 5, 4, 8), 6).unwrap();
    let cfg = SpectralConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
    net.train_step(&x, &[0, 1, 2, 3], 0.01, &TrainHyper::default(), Some(&cfg), None).unwrap();
    net.adjust_spectral_norms(&cfg).unwrap();
    let logits = net.predict(&x).unwrap();
    let perm = [2, 0, 3, 1];
    let per = 3 * 8 * 8;
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(&x.data()[p * per..(p + 1) * per]);
    }
    let plogits = net.predict(&Tensor::new(vec![4, 3, 8, 8], px).unwrap()).unwrap();
    for (row, &p) in perm.iter().enumerate() {
        for c in 0..4 {
            assert!((plogits.data()[row * 4 + c] - logits.data()[p * 4 + c]).abs() < 1e-12);
        }
    }
}

fn trained_small_net(steps: usize) -> (Network, SpectralConfig) {
    let cfg = small(4, 5, 8, 16);
    let mut net = Network::supernet(&cfg, 1).unwrap();
    let ds = synth_dataset(&SynthSpec {
        samples_per_class: 80,
        ..SynthSpec::default()
    })
    .unwrap();
    let sc = SpectralConfig::default();
    let hyper = TrainHyper::default();
    for b in BatchIter::new(&ds, 32, Some(1), true).take(steps) {
        net.train_step(&b.images, &b.labels, hyper.initial_lr, &hyper, Some(&sc), None).unwrap();
    }
    (net, sc)
}

#[test]
fn adjusted_norms_stay_at_target_during_training() {
    // weights already moved by training; then ten back-to-back adjustments
    let (mut net, sc) = trained_small_net(10);
    for _ in 0..10 {
        net.adjust_spectral_norms(&sc).unwrap();
    }
    let cold = net.cold_spectral_norms(50, 123).unwrap();
    let warm = net.reestimate_spectral_norms(50).unwrap();
    for (i, (c, w)) in cold.iter().zip(&warm).enumerate() {
        assert!((0.99..=1.01).contains(c), "handle {i}: cold {c}");
        assert!((0.99..=1.01).contains(w), "handle {i}: warm {w}");
    }
}

#[test]
fn rank_table_averages_cells_of_each_type() {
    let cfg = small(6, 4, 4, 8);
    let net = Network::supernet(&cfg, 8).unwrap();
    let sc = SpectralConfig::default();
    let table = net.collect_rank_table(&sc).unwrap();
    assert_eq!(table.entries().len(), 2 * cell_edges(4).len() * 4);
    for e in table.entries() {
        let mut ranks = Vec::new();
        for cell in net.cells().iter().filter(|c| c.cell_type == e.cell_type) {
            let op = cell.edge(e.from, e.to).unwrap().op(e.op).unwrap();
            let h = &net.handles()[op.fin_handle()];
            ranks.push(stable_rank(&h.geom, net.store().value(h.param), h.input_hw, &sc).unwrap().rank);
        }
        let mean = ranks.iter().sum::<f64>() / ranks.len() as f64;
        assert_eq!(e.cells.len(), ranks.len());
        assert!((e.mean.unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn duplicated_cells_have_identical_ranks() {
    // cells 0 and 1 are both normal with the same shapes
    let mut net = Network::supernet(&small(6, 4, 4, 8), 9).unwrap();
    let names: Vec<(String, String)> = net
        .store()
        .iter()
        .filter(|(_, p)| p.name.starts_with("cell0.e"))
        .map(|(_, p)| (p.name.clone(), p.name.replacen("cell0.", "cell1.", 1)))
        .collect();
    for (from, to) in names {
        let v = net.store().value(net.store().id(&from).unwrap()).clone();
        let id = net.store().id(&to).unwrap();
        *net.store_mut().value_mut(id) = v;
    }
    let table = net.collect_rank_table(&SpectralConfig::default()).unwrap();
    for e in table.entries().iter().filter(|e| e.cell_type == CellType::Normal) {
        let r0 = e.cells.iter().find(|c| c.cell == 0).unwrap().rank;
        let r1 = e.cells.iter().find(|c| c.cell == 1).unwrap().rank;
        assert_eq!(r0, r1);
    }
}

#[test]
fn single_cell_type_entries_equal_closed_form_ranks() {
    // L = 3: cell 0 is the only normal cell; every last conv is a 1x1 map
    // with singular values set by hand, so the matrix-view stable rank is
    // H * W * sum(s^2) / max(s)^2.
    let cfg = small(3, 5, 4, 8);
    let mut net = Network::supernet(&cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut expected = std::collections::HashMap::new();
    let jobs: Vec<(usize, usize, usize, OperatorKind, usize)> = net
        .cells()
        .iter()
        .flat_map(|c| {
            c.edges()
                .flat_map(move |e| e.ops.iter().map(move |o| (c.index, e.from, e.to, o.kind, o.fin_handle())))
        })
        .collect();
    for (cell, from, to, kind, handle) in jobs {
        use rand::Rng;
        let h = &net.handles()[handle];
        let n = h.geom.in_channels;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        // W = P diag(s) Q with P a signed cyclic shift and Q a reversal
        let mut w = vec![0.0; n * n];
        for (k, sk) in s.iter().enumerate() {
            let row = (k + 1) % n;
            let col = n - 1 - k;
            w[row * n + col] = if k % 2 == 0 { *sk } else { -sk };
        }
        let (hh, ww) = h.input_hw;
        let param = h.param;
        *net.store_mut().value_mut(param) = Tensor::new(vec![n, n, 1, 1], w).unwrap();
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let rank = (hh * ww) as f64 * s.iter().map(|v| v * v).sum::<f64>() / (smax * smax);
        expected.entry((net.cells()[cell].cell_type, from, to, kind)).or_insert_with(Vec::new).push(rank);
    }
    let table = net.collect_rank_table(&SpectralConfig::default()).unwrap();
    for e in table.entries() {
        let v = &expected[&(e.cell_type, e.from, e.to, e.op)];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let got = e.mean.unwrap();
        assert!((got - mean).abs() / mean < 0.01, "{:?}: {got} vs {mean}", (e.cell_type, e.from, e.to, e.op));
        if e.cell_type == CellType::Normal {
            assert_eq!(v.len(), 1);
        }
    }
}

#[test]
fn uniform_weight_scale_keeps_every_argmin() {
    let (mut net, sc) = trained_small_net(3);
    let before = net.collect_rank_table(&sc).unwrap();
    for p in net.store_mut().iter_mut() {
        if p.name.ends_with(".weight") && p.value.shape().len() == 4 {
            p.value.scale(-2.5);
        }
    }
    let after = net.collect_rank_table(&sc).unwrap();
    for t in CellType::ALL {
        for edge in cell_edges(5) {
            for mode in [SelectionMode::MinStableRank, SelectionMode::MaxStableRank] {
                assert_eq!(
                    best_operator(&before, t, edge, mode).unwrap(),
                    best_operator(&after, t, edge, mode).unwrap()
                );
            }
        }
    }
}

#[test]
fn zero_conv_is_flagged_in_the_table() {
    let mut net = Network::supernet(&small(3, 4, 4, 8), 12).unwrap();
    let h = net.cells()[0].edge(0, 2).unwrap().op(OperatorKind::SepConv3x3).unwrap().fin_handle();
    let pid = net.handles()[h].param;
    net.store_mut().value_mut(pid).fill(0.0);
    let table = net.collect_rank_table(&SpectralConfig::default()).unwrap();
    assert_eq!(table.rank(CellType::Normal, (0, 2), OperatorKind::SepConv3x3).unwrap(), None);
    assert!(table.rank(CellType::Reduce, (0, 2), OperatorKind::SepConv3x3).unwrap().is_some());
}

#[test]
fn checkpoint_round_trip_restores_state() {
    let (mut net, sc) = trained_small_net(2);
    net.epoch = 3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.msrn");
    net.save_checkpoint(&path).unwrap();
    let mut back = Network::load_supernet_checkpoint(&path).unwrap();
    assert_eq!(back.named_tensors(), net.named_tensors());
    assert_eq!(back.epoch, 3);
    net.adjust_spectral_norms(&sc).unwrap();
    back.adjust_spectral_norms(&sc).unwrap();
    let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(net.predict(&x).unwrap(), back.predict(&x).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Network::load_supernet_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn discrete_network_keeps_only_planned_edges() {
    use msr_core::supernet::CellPlan;
    let plan = CellPlan {
        nodes: vec![
            vec![(0, vec![OperatorKind::DilConv5x5]), (1, vec![OperatorKind::DilConv5x5])],
            vec![(0, vec![OperatorKind::DilConv5x5]), (2, vec![OperatorKind::DilConv5x5])],
        ],
    };
    let cfg = small(4, 5, 4, 16);
    let mut net = Network::discrete(&cfg, &plan, &plan, 13).unwrap();
    assert!(!net.is_constrained());
    assert_eq!(net.cells()[0].edges().count(), 4);
    let x = Tensor::randn(&[3, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let stats = net.train_step(&x, &[0, 1, 2], 0.05, &TrainHyper::default(), None, Some(5.0)).unwrap();
    assert!(stats.loss.is_finite());
    assert_eq!(net.predict(&x).unwrap().shape(), &[3, 4]);
}
