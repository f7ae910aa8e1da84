//! Oracles and helpers shared by the integration suites.
#![allow(dead_code)]

use msr_core::derive::{Choice, SelectionMode};
use msr_core::nn::{BnStats, ConvGeometry, ParamId, ParamStore, Tape, Var};
use msr_core::rank_table::RankTable;
use msr_core::spectral::SpectralConfig;
use msr_core::supernet::{CellType, Network, OperatorKind, SupernetConfig};
use msr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CellPlan = Vec<[Choice; 2]>;

/// Relative tolerance and step of every finite-difference check.
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor on the denominator, so entries
/// whose gradient is essentially zero are compared absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `loss` with respect to one scalar of one parameter.
pub fn central_difference<S>(
    state: &mut S,
    store: fn(&mut S) -> &mut ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    mut loss: impl FnMut(&mut S) -> f64,
) -> f64 {
    let orig = store(state).value(id).data()[index];
    store(state).value_mut(id).data_mut()[index] = orig + h;
    let plus = loss(state);
    store(state).value_mut(id).data_mut()[index] = orig - h;
    let minus = loss(state);
    store(state).value_mut(id).data_mut()[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Worst relative error over the given `(parameter, index)` probes.
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

pub fn check_gradients<S>(
    state: &mut S,
    store: fn(&mut S) -> &mut ParamStore,
    probes: &[(ParamId, usize)],
    h: f64,
    mut loss: impl FnMut(&mut S) -> f64,
) -> GradReport {
    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for &(id, index) in probes {
        let analytic = store(state).grad(id).data()[index];
        let numeric = central_difference(state, store, id, index, h, &mut loss);
        let e = rel_error(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel {
            report.max_rel = e;
            report.worst = format!(
                "{}[{index}]: analytic {analytic:e}, numeric {numeric:e}",
                store(state).name(id)
            );
        }
    }
    report
}

/// Every entry of every parameter.
pub fn all_probes(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect()
}

/// Up to `per_param` random entries of every parameter.
pub fn sampled_probes<R: Rng>(store: &ParamStore, per_param: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        let n = p.value.len();
        if n <= per_param {
            out.extend((0..n).map(|i| (id, i)));
        } else {
            out.extend((0..per_param).map(|_| (id, rng.random_range(0..n))));
        }
    }
    out
}

fn store_of(s: &mut ParamStore) -> &mut ParamStore {
    s
}

/// Reduces an NCHW tensor to a scalar through a random full-extent
/// convolution, average pooling and cross-entropy, so every output entry
/// carries a distinct gradient.
pub fn head(tape: &mut Tape, store: &ParamStore, x: Var, proj: ParamId, labels: &[usize]) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let k = store.value(proj).shape()[0];
    let g = ConvGeometry {
        in_channels: shape[1],
        out_channels: k,
        kernel_h: shape[2],
        kernel_w: shape[3],
        stride: 1,
        padding: 0,
        dilation: 1,
        groups: 1,
    };
    let w = tape.param(store, proj);
    let y = tape.conv2d(x, w, g).unwrap();
    let y = tape.global_avg_pool(y).unwrap();
    tape.cross_entropy(y, labels).unwrap()
}

/// Runs `build` once with backward for analytic gradients, then checks every
/// parameter entry against central differences.
pub fn check_all(store: &mut ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> Var) -> GradReport {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, store).unwrap();
    let probes = all_probes(store);
    check_gradients(store, store_of, &probes, GRAD_STEP, |s| {
        let mut t = Tape::new();
        let l = build(&mut t, s);
        t.value(l).data()[0]
    })
}

fn setup(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

/// Finite-difference reports for every differentiable tape operation.
pub fn op_gradient_reports() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let geoms = [
        ConvGeometry::new(3, 4, 3).padding(1),
        ConvGeometry::new(2, 2, 3).padding(2).dilation(2).groups(2),
        ConvGeometry::new(4, 2, 5).stride(2).padding(2),
        ConvGeometry::new(4, 4, 1).stride(2),
        ConvGeometry::new(2, 4, 3).stride(2).padding(1).groups(2),
    ];
    for (i, g) in geoms.into_iter().enumerate() {
        let (mut store, mut rng) = setup(i as u64);
        let x = store.add("x", Tensor::randn(&[2, g.in_channels, 6, 6], 1.0, &mut rng)).unwrap();
        let w = store.add("w", Tensor::randn(&g.weight_shape(), 0.5, &mut rng)).unwrap();
        let (oh, ow) = g.output_hw(6, 6).unwrap();
        let p = store.add("p", Tensor::randn(&[3, g.out_channels, oh, ow], 0.5, &mut rng)).unwrap();
        let r = check_all(&mut store, |t, s| {
            let (xv, wv) = (t.param(s, x), t.param(s, w));
            let y = t.conv2d(xv, wv, g).unwrap();
            head(t, s, y, p, &[0, 2])
        });
        out.push((format!("conv2d #{i}"), r));
    }

    for training in [true, false] {
        let (mut store, mut rng) = setup(7);
        let x = store.add("x", Tensor::randn(&[3, 2, 3, 3], 1.5, &mut rng)).unwrap();
        let gamma = store.add("gamma", Tensor::randn(&[2], 1.0, &mut rng)).unwrap();
        let beta = store.add("beta", Tensor::randn(&[2], 1.0, &mut rng)).unwrap();
        let p = store.add("p", Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng)).unwrap();
        let stats = BnStats {
            mean: vec![0.3, -0.2],
            var: vec![1.7, 0.6],
        };
        let r = check_all(&mut store, |t, s| {
            let mut st = stats.clone();
            let (xv, g, b) = (t.param(s, x), t.param(s, gamma), t.param(s, beta));
            let y = t.batch_norm(xv, g, b, &mut st, training).unwrap();
            head(t, s, y, p, &[1, 0, 2])
        });
        out.push((format!("batch_norm training={training}"), r));
    }

    let (mut store, mut rng) = setup(8);
    let x = store.add("x", Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng)).unwrap();
    let p = store.add("p", Tensor::randn(&[3, 2, 4, 4], 0.5, &mut rng)).unwrap();
    let r = check_all(&mut store, |t, s| {
        let xv = t.param(s, x);
        let y = t.relu(xv);
        head(t, s, y, p, &[0, 1])
    });
    out.push(("relu".to_string(), r));

    let (mut store, mut rng) = setup(9);
    let a = store.add("a", Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng)).unwrap();
    let b = store.add("b", Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng)).unwrap();
    let c = store.add("c", Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng)).unwrap();
    let p = store.add("p", Tensor::randn(&[3, 5, 3, 3], 0.5, &mut rng)).unwrap();
    let r = check_all(&mut store, |t, s| {
        let (av, bv, cv) = (t.param(s, a), t.param(s, b), t.param(s, c));
        let sum = t.add(&[av, bv, av]).unwrap();
        let cat = t.concat(&[sum, cv]).unwrap();
        let cropped = t.crop(cat, 1).unwrap();
        let scaled = t.scale(cropped, -1.7);
        head(t, s, scaled, p, &[2, 1])
    });
    out.push(("add/concat/crop/scale".to_string(), r));

    let (mut store, mut rng) = setup(10);
    let x = store.add("x", Tensor::randn(&[3, 4, 2, 3], 1.0, &mut rng)).unwrap();
    let w = store.add("w", Tensor::randn(&[5, 4], 0.7, &mut rng)).unwrap();
    let b = store.add("b", Tensor::randn(&[5], 0.7, &mut rng)).unwrap();
    let r = check_all(&mut store, |t, s| {
        let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let pooled = t.global_avg_pool(xv).unwrap();
        let logits = t.linear(pooled, wv, bv).unwrap();
        t.cross_entropy(logits, &[4, 0, 2]).unwrap()
    });
    out.push(("avg_pool/linear/cross_entropy".to_string(), r));
    out
}

/// Supernet with L=2, N=5, 4 channels on a batch of three 8x8 images.
pub fn tiny_supernet() -> (Network, Tensor, Vec<usize>) {
    let cfg = SupernetConfig {
        cells: 2,
        nodes: 5,
        channels: 4,
        num_classes: 3,
        input_channels: 3,
        input_size: (8, 8),
    };
    let mut net = Network::supernet(&cfg, 5).unwrap();
    net.adjust_spectral_norms(&SpectralConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
    (net, images, vec![0, 2, 1])
}

pub fn supernet_loss(net: &mut Network, images: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, images, true).unwrap();
    let l = tape.cross_entropy(logits, labels).unwrap();
    tape.value(l).data()[0]
}

/// Full supernet loss against central differences on `per_param` sampled
/// entries of every parameter plus every stem weight.
pub fn supernet_gradient_report(per_param: usize, seed: u64) -> GradReport {
    let (mut net, images, labels) = tiny_supernet();
    net.loss_and_grad(&images, &labels, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = sampled_probes(net.store(), per_param, &mut rng);
    let stem = net.handles()[net.stem_handle()].param;
    probes.extend((0..net.store().value(stem).len()).map(|i| (stem, i)));
    check_gradients(&mut net, Network::store_mut, &probes, GRAD_STEP, |n| supernet_loss(n, &images, &labels))
}

/// A random convolution from the small oracle corpus: channels <= 4,
/// spatial <= 8, kernels 3 or 5, stride 1-2, dilation 1-2, plain, grouped
/// or depthwise.
pub struct CorpusConv {
    pub geom: ConvGeometry,
    pub weight: Tensor,
    pub hw: (usize, usize),
}

pub fn random_corpus_conv<R: Rng>(rng: &mut R, index: usize) -> CorpusConv {
    // cycle through the four operator kernel shapes so each appears
    let (k, dilation) = [(3, 1), (5, 1), (3, 2), (5, 2)][index % 4];
    let stride = rng.random_range(1..=2);
    loop {
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let groups = match rng.random_range(0..3) {
            0 if cin == cout => cin,
            1 if cin % 2 == 0 && cout % 2 == 0 => 2,
            _ => 1,
        };
        let max_pad = dilation * (k - 1) / 2;
        let padding = rng.random_range(0..=max_pad);
        let h = rng.random_range(2..=8);
        let w = rng.random_range(2..=8);
        let geom = ConvGeometry::new(cin, cout, k)
            .stride(stride)
            .padding(padding)
            .dilation(dilation)
            .groups(groups);
        if geom.output_hw(h, w).is_err() {
            continue;
        }
        let weight = Tensor::randn(&geom.weight_shape(), 1.0, rng);
        return CorpusConv { geom, weight, hw: (h, w) };
    }
}

fn score(mode: SelectionMode, r: Option<f64>) -> f64 {
    match (mode, r) {
        (_, None) => f64::NEG_INFINITY,
        (SelectionMode::MinStableRank, Some(r)) => -r,
        (SelectionMode::MaxStableRank, Some(r)) => r,
    }
}

/// Exhaustive per-node enumerator: scores every `(predecessor pair,
/// operator, operator)` assignment by (stronger edge strength, weaker edge
/// strength, operator scores) and keeps the best, preferring lower indices
/// on exact ties. `None` if some edge has only degenerate operators.
pub fn brute_force_genotype(table: &RankTable, mode: SelectionMode) -> Option<(CellPlan, CellPlan)> {
    let ops = OperatorKind::ALL;
    let strength = |t: CellType, i: usize, j: usize| -> f64 {
        ops.iter()
            .map(|&o| score(mode, table.rank(t, (i, j), o).unwrap()))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut cells = Vec::new();
    for t in [CellType::Normal, CellType::Reduce] {
        let mut nodes = Vec::new();
        for j in 2..table.nodes - 1 {
            if (0..j).any(|i| strength(t, i, j) == f64::NEG_INFINITY) {
                return None;
            }
            type Key = (f64, f64, f64, f64);
            let mut best: Option<(Key, [usize; 4])> = None;
            for a in 0..j {
                for b in 0..j {
                    if a == b {
                        continue;
                    }
                    let (sa, sb) = (strength(t, a, j), strength(t, b, j));
                    // (a, b) lists the stronger edge first; equal strengths
                    // list the lower index first
                    if sa < sb || (sa == sb && a > b) {
                        continue;
                    }
                    for (oa, &opa) in ops.iter().enumerate() {
                        for (ob, &opb) in ops.iter().enumerate() {
                            let key = (
                                sa,
                                sb,
                                score(mode, table.rank(t, (a, j), opa).unwrap()),
                                score(mode, table.rank(t, (b, j), opb).unwrap()),
                            );
                            let idx = [a, b, oa, ob];
                            let better = match &best {
                                None => true,
                                Some((bk, bi)) => {
                                    let ord = key.partial_cmp(bk).unwrap();
                                    ord == std::cmp::Ordering::Greater
                                        || (ord == std::cmp::Ordering::Equal && idx < *bi)
                                }
                            };
                            if better {
                                best = Some((key, idx));
                            }
                        }
                    }
                }
            }
            let (_, [a, b, oa, ob]) = best.unwrap();
            nodes.push([(ops[oa], a), (ops[ob], b)]);
        }
        cells.push(nodes);
    }
    let reduce = cells.pop().unwrap();
    let normal = cells.pop().unwrap();
    Some((normal, reduce))
}

/// Random table with values in [1, 6]; some values are snapped to a coarse
/// grid to create ties and a few are flagged degenerate.
pub fn random_rank_table<R: Rng>(rng: &mut R, nodes: usize, flag_prob: f64) -> RankTable {
    RankTable::from_fn(nodes, |_, _, _| {
        if rng.random_bool(flag_prob) {
            return None;
        }
        let v: f64 = rng.random_range(1.0..6.0);
        Some(if rng.random_bool(0.2) { (v * 2.0).round() / 2.0 } else { v })
    })
}
