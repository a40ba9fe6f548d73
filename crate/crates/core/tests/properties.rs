use std::collections::BTreeSet;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use trajnet_core::agingvae::{decode_graph, kl_divergence, one_hot_gap, AgingVaeModel, GraphDecoderModel};
use trajnet_core::conversion::ConversionModel;
use trajnet_core::datamodel::{AtlasTopology, BrainNetwork, GraphFeature, Matrix, FEATURE_DIM, GRAPH_FEATURE_DIM};
use trajnet_core::graphencoder::{encode_graph, GatLayer, GraphEncoderModel, GraphIndex};
use trajnet_core::harness::{compute_metrics, kfold_split, Metrics};
use trajnet_core::interpret::{rank_edges, residual_network, Averaging, ResidualNetwork};
use trajnet_core::netgen::{contrastive_loss, contrastive_loss_value, ContrastiveOptions};
use trajnet_core::nn::{Activation, ParamStore};

const OPTS: [ContrastiveOptions; 4] = [
    ContrastiveOptions { symmetric: true, include_positive: true },
    ContrastiveOptions { symmetric: true, include_positive: false },
    ContrastiveOptions { symmetric: false, include_positive: true },
    ContrastiveOptions { symmetric: false, include_positive: false },
];

fn t64(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

// Plain-loop InfoNCE.
fn infonce_oracle(a: &[Vec<f32>], b: &[Vec<f32>], tau: f64, opts: ContrastiveOptions) -> f64 {
    let n = a.len();
    let unit = |v: &Vec<f32>| -> Vec<f64> {
        let l = norm(v);
        v.iter().map(|x| *x as f64 / l).collect()
    };
    let (ua, ub): (Vec<_>, Vec<_>) = (a.iter().map(unit).collect(), b.iter().map(unit).collect());
    let s = |i: usize, j: usize| ua[i].iter().zip(&ub[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let dir = |sim: &dyn Fn(usize, usize) -> f64| -> f64 {
        (0..n)
            .map(|i| {
                let terms: Vec<f64> = (0..n).filter(|&j| opts.include_positive || j != i).map(|j| sim(i, j)).collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - sim(i, i)
            })
            .sum::<f64>()
            / n as f64
    };
    let fwd = dir(&s);
    if opts.symmetric {
        0.5 * (fwd + dir(&|i, j| s(j, i)))
    } else {
        fwd
    }
}

fn nonzero_rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-10.0f32..10.0, d), n).prop_filter("rows need length", |rows| {
        rows.iter().all(|r| norm(r) > 1e-2)
    })
}

fn pair_batch() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    (2usize..7, 2usize..6).prop_flat_map(|(n, d)| (nonzero_rows(n, d), nonzero_rows(n, d)))
}

fn mat(rows: &[Vec<f32>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

/// Random connected-ish small graph: a path plus random chords.
fn small_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..8).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 0..12).prop_map(move |extra| {
            let mut set: BTreeSet<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
            for (u, v) in extra {
                if u != v {
                    set.insert((u.min(v), u.max(v)));
                }
            }
            (n, set.into_iter().collect())
        })
    })
}

fn rng_for(seed: u64, tag: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn random_layer(in_dim: usize, heads: usize, head_dim: usize, seed: u64) -> GatLayer {
    let mut rng = rng_for(seed, 1);
    let mut store = ParamStore::new(DType::F64);
    GatLayer::new(&mut store, "gat", in_dim, FEATURE_DIM, heads, head_dim, &mut rng).unwrap()
}

fn random_network(topology: Arc<AtlasTopology>, seed: u64) -> BrainNetwork {
    use rand::Rng;
    let mut rng = rng_for(seed, 2);
    let mut m = |rows: usize| {
        let data = (0..rows * FEATURE_DIM).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        Matrix::from_vec(rows, FEATURE_DIM, data).unwrap()
    };
    let (n, e) = (m(topology.node_count()), m(topology.edge_count()));
    BrainNetwork::new(topology, n, e, "s", 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_matches_plain_loop_oracle((a, b) in pair_batch(), tau in 0.05f64..2.0, k in 0usize..4) {
        let got = contrastive_loss_value(&mat(&a), &mat(&b), tau, OPTS[k]).unwrap();
        let want = infonce_oracle(&a, &b, tau, OPTS[k]);
        prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn contrastive_is_invariant_to_row_scaling(
        (a, b) in pair_batch(),
        scales in prop::collection::vec(0.1f32..10.0, 6),
        k in 0usize..4,
    ) {
        let scaled: Vec<Vec<f32>> = a.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        let l0 = contrastive_loss_value(&mat(&a), &mat(&b), 0.1, OPTS[k]).unwrap();
        let l1 = contrastive_loss_value(&mat(&scaled), &mat(&b), 0.1, OPTS[k]).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-4 * l0.abs().max(1.0), "{l0} vs {l1}");
        prop_assert!(l0.is_finite());
        if OPTS[k].include_positive {
            prop_assert!(l0 >= -1e-9);
        }
    }

    #[test]
    fn attention_rows_are_distributions_over_neighbours(
        (n, edges) in small_graph(),
        heads in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = rng_for(seed, 3);
        let index = GraphIndex::new(n, &edges, DType::F64).unwrap();
        let layer = random_layer(5, heads, 3, seed);
        let x: Vec<f64> = (0..2 * n * 5).map(|_| rng.random_range(-10.0..10.0)).collect();
        let e: Vec<f64> = (0..2 * edges.len() * FEATURE_DIM).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (out, alpha) = layer
            .forward(&t64(&x, &[2, n, 5]), &t64(&e, &[2, edges.len(), FEATURE_DIM]), &index)
            .unwrap();
        prop_assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
        prop_assert_eq!(alpha.dims(), &[2, heads, n, n]);
        let adj: BTreeSet<(usize, usize)> = edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
        for b in 0..2 {
            for h in 0..heads {
                let a = alpha.get(b).unwrap().get(h).unwrap().to_vec2::<f64>().unwrap();
                for i in 0..n {
                    let sum: f64 = a[i].iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
                    for j in 0..n {
                        if i != j && !adj.contains(&(i, j)) {
                            prop_assert!(a[i][j] < 1e-12, "non-neighbour weight {}", a[i][j]);
                        }
                        prop_assert!(a[i][j] >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn rank_edges_matches_stable_sort(
        values in prop::collection::vec(0u8..6, 1..80),
        fraction in 0.01f64..=1.0,
    ) {
        let edge: Vec<f64> = values.iter().map(|v| *v as f64 * 0.5).collect();
        let r = ResidualNetwork { edge: edge.clone(), node: vec![], subject_id: "s".into(), visits: (0, 1) };
        let got = rank_edges(&r, fraction).unwrap();
        let mut want: Vec<usize> = (0..edge.len()).collect();
        want.sort_by(|a, b| edge[*b].partial_cmp(&edge[*a]).unwrap());
        want.truncate((fraction * edge.len() as f64).floor() as usize);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn kfold_partitions_and_stratifies(
        pos in 3usize..30,
        neg in 3usize..30,
        k in 2usize..4,
        seed in any::<u64>(),
        order in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut labels: Vec<bool> = (0..pos).map(|_| true).chain((0..neg).map(|_| false)).collect();
        labels.shuffle(&mut rng_for(order, 0));
        let folds = kfold_split(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = BTreeSet::new();
        for (train, test) in &folds {
            let tr: BTreeSet<_> = train.iter().copied().collect();
            let te: BTreeSet<_> = test.iter().copied().collect();
            prop_assert!(tr.is_disjoint(&te));
            prop_assert_eq!(tr.len() + te.len(), labels.len());
            for i in &te {
                prop_assert!(seen.insert(*i), "index {} tested twice", i);
            }
        }
        prop_assert_eq!(seen.len(), labels.len());
        for class in [true, false] {
            let counts: Vec<usize> = folds.iter().map(|(_, t)| t.iter().filter(|i| labels[**i] == class).count()).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{:?}", counts);
        }
        let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(kfold_split(&labels, k, seed).unwrap(), folds);
    }

    #[test]
    fn metric_identities(
        rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60),
        threshold in 0.0f64..1.0,
        cut in 0usize..60,
    ) {
        let (p, l): (Vec<f64>, Vec<bool>) = rows.iter().cloned().unzip();
        let m = compute_metrics(&p, &l, threshold).unwrap();
        let n = p.len();
        prop_assert_eq!(m.tp + m.tn + m.fp + m.fn_, n);
        prop_assert_eq!(m.tp + m.fn_, l.iter().filter(|x| **x).count());
        let acc = m.accuracy.value().unwrap();
        prop_assert!((acc - (m.tp + m.tn) as f64 / n as f64).abs() < 1e-12);
        prop_assert_eq!(m.sensitivity.value().is_some(), m.tp + m.fn_ > 0);
        prop_assert_eq!(m.specificity.value().is_some(), m.tn + m.fp > 0);
        if let (Some(se), Some(sp)) = (m.sensitivity.value(), m.specificity.value()) {
            let pos = (m.tp + m.fn_) as f64;
            let balanced = (se * pos + sp * (n as f64 - pos)) / n as f64;
            prop_assert!((balanced - acc).abs() < 1e-12);
        }
        let c = cut.min(n);
        if c > 0 && c < n {
            let a = compute_metrics(&p[..c], &l[..c], threshold).unwrap();
            let b = compute_metrics(&p[c..], &l[c..], threshold).unwrap();
            prop_assert_eq!(Metrics::pooled(&[a, b]), m);
        }
    }

    #[test]
    fn kl_matches_closed_form(
        mu in prop::collection::vec(-10.0f64..10.0, 6),
        lv in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let got = scalar(&kl_divergence(&t64(&mu, &[2, 3]), &t64(&lv, &[2, 3])).unwrap());
        let want: f64 = mu.iter().zip(&lv).map(|(m, l)| 0.5 * (l.exp() + m * m - l - 1.0)).sum::<f64>() / 2.0;
        prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
        prop_assert!(got >= -1e-12);
    }

    #[test]
    fn one_hot_gap_is_a_unit_vector(n in 0usize..40, width in 1usize..32) {
        match one_hot_gap(n, width) {
            Ok(v) => {
                prop_assert!(n >= 1 && n <= width);
                prop_assert_eq!(v.len(), width);
                prop_assert_eq!(v.iter().sum::<f32>(), 1.0);
                prop_assert_eq!(v[n - 1], 1.0);
            }
            Err(_) => prop_assert!(n == 0 || n > width),
        }
    }
}

// Oracle LSTM written against the raw weight layout `x·W + b`.
fn lstm_oracle(model: &ConversionModel, steps: &[Vec<f64>]) -> Vec<f64> {
    let get = |name: &str| model.store().get(name).unwrap().as_tensor().to_dtype(DType::F64).unwrap();
    let wi = get("lstm.input.weight").to_vec2::<f64>().unwrap();
    let bi = get("lstm.input.bias").to_vec1::<f64>().unwrap();
    let wr = get("lstm.recurrent.weight").to_vec2::<f64>().unwrap();
    let hd = model.hidden();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
    for x in steps {
        let gate = |k: usize| -> f64 {
            let mut s = bi[k];
            for (i, xi) in x.iter().enumerate() {
                s += xi * wi[i][k];
            }
            for (j, hj) in h.iter().enumerate() {
                s += hj * wr[j][k];
            }
            s
        };
        let pre: Vec<f64> = (0..4 * hd).map(gate).collect();
        for u in 0..hd {
            let (i, f, g) = (sig(pre[u]), sig(pre[hd + u]), pre[2 * hd + u].tanh());
            c[u] = f * c[u] + i * g;
        }
        for u in 0..hd {
            let o = sig(pre[3 * hd + u]);
            h[u] = o * c[u].tanh();
        }
    }
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lstm_recurrence_matches_oracle(hidden in 1usize..6, len in 1usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let model = ConversionModel::new(hidden, seed, DType::F64).unwrap();
        let mut rng = rng_for(seed, 4);
        let steps: Vec<Vec<f64>> =
            (0..len).map(|_| (0..GRAPH_FEATURE_DIM).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let tensors: Vec<Tensor> = steps.iter().map(|s| t64(s, &[1, GRAPH_FEATURE_DIM])).collect();
        let h = model.run(&tensors).unwrap().h.to_vec2::<f64>().unwrap().remove(0);
        let want = lstm_oracle(&model, &steps);
        prop_assert!(h.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9), "{:?} vs {:?}", h, want);
        // A batch of two identical sequences gives the same state twice.
        let doubled: Vec<Tensor> = tensors.iter().map(|t| Tensor::cat(&[t, t], 0).unwrap()).collect();
        let hb = model.run(&doubled).unwrap().h.to_vec2::<f64>().unwrap();
        prop_assert_eq!(&hb[0], &hb[1]);
        prop_assert!(hb[0].iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn decoder_emits_full_finite_networks(values in prop::collection::vec(-10.0f32..10.0, GRAPH_FEATURE_DIM), seed in 0u64..1000) {
        let mut dec = GraphDecoderModel::new(Activation::Relu, seed, DType::F32).unwrap();
        dec.set_trained();
        let topo = AtlasTopology::canonical();
        let g = decode_graph(&dec, &GraphFeature::new(values, "s", 3).unwrap(), topo.clone()).unwrap();
        prop_assert_eq!(g.node_features().shape(), (68, FEATURE_DIM));
        prop_assert_eq!(g.edge_features().shape(), (2227, FEATURE_DIM));
        prop_assert!(g.node_features().is_finite() && g.edge_features().is_finite());
        prop_assert!(Arc::ptr_eq(g.topology(), &topo));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn residual_network_matches_naive_loops(
        seed in any::<u64>(),
        signed in any::<bool>(),
    ) {
        let topo = AtlasTopology::canonical();
        let a = random_network(topo.clone(), seed);
        let b = random_network(topo, seed ^ 0x55);
        let how = if signed { Averaging::SignedMean } else { Averaging::MeanAbs };
        let r = residual_network(&a, &b, how).unwrap();
        let naive = |x: &Matrix, y: &Matrix| -> Vec<f64> {
            let mut out = Vec::new();
            for i in 0..x.rows() {
                let mut acc = 0.0;
                for j in 0..FEATURE_DIM {
                    let d = x.row(i)[j] as f64 - y.row(i)[j] as f64;
                    acc += if signed { d } else { d.abs() };
                }
                out.push((acc / FEATURE_DIM as f64).abs());
            }
            out
        };
        let (we, wn) = (naive(a.edge_features(), b.edge_features()), naive(a.node_features(), b.node_features()));
        prop_assert!(r.edge.iter().zip(&we).all(|(p, q)| (p - q).abs() < 1e-9));
        prop_assert!(r.node.iter().zip(&wn).all(|(p, q)| (p - q).abs() < 1e-9));
        let swapped = residual_network(&b, &a, how).unwrap();
        prop_assert!(swapped.edge.iter().zip(&r.edge).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn encoder_is_invariant_to_node_relabelling(seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut model = GraphEncoderModel::new(2, [8, 8], Activation::Elu, seed, DType::F32).unwrap();
        model.set_trained();
        let topo = AtlasTopology::canonical();
        let g = random_network(topo.clone(), seed);
        let mut perm: Vec<usize> = (0..topo.node_count()).collect();
        perm.shuffle(&mut rng_for(perm_seed, 0));
        let (pt, origin) = topo.permuted(&perm).unwrap();
        let mut nodes = Matrix::zeros(68, FEATURE_DIM);
        for (i, &p) in perm.iter().enumerate() {
            nodes.row_mut(p).copy_from_slice(g.node_features().row(i));
        }
        let edges = g.edge_features().select_rows(&origin);
        let h = BrainNetwork::new(Arc::new(pt), nodes, edges, "s", 0).unwrap();
        let fa = encode_graph(&model, &g).unwrap();
        let fb = encode_graph(&model, &h).unwrap();
        let worst = fa.values().iter().zip(fb.values()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        prop_assert!(worst < 1e-4, "max deviation {worst}");
    }
}

// Central differences against autograd, in double precision.
fn check_gradients(vars: &[Var], loss: &dyn Fn() -> Tensor, coords_per_var: usize, tol: f64) {
    let grads = loss().backward().unwrap();
    for (vi, var) in vars.iter().enumerate() {
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().dims().to_vec();
        let g = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let step = (base.len() / coords_per_var).max(1);
        for k in (0..base.len()).step_by(step).take(coords_per_var) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                var.set(&t64(&v, &shape)).unwrap();
                scalar(&loss())
            };
            let h = 1e-6;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&t64(&base, &shape)).unwrap();
            assert!(
                (fd - g[k]).abs() <= tol * fd.abs().max(1.0),
                "var {vi} coord {k}: autograd {} vs finite difference {fd}",
                g[k]
            );
        }
    }
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let a: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.7 + 0.1).collect();
    let b: Vec<f64> = (0..12).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.4 - 0.2).collect();
    let za = Var::from_tensor(&t64(&a, &[4, 3])).unwrap();
    let zb = Var::from_tensor(&t64(&b, &[4, 3])).unwrap();
    for opts in OPTS {
        let loss = || contrastive_loss(za.as_tensor(), zb.as_tensor(), 0.5, opts).unwrap();
        check_gradients(&[za.clone(), zb.clone()], &loss, 12, 1e-6);
    }
}

#[test]
fn vae_objective_gradient_matches_finite_differences() {
    let model = AgingVaeModel::new(0.3, Activation::Tanh, 11, DType::F64).unwrap();
    let x: Vec<f64> = (0..2 * GRAPH_FEATURE_DIM).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let y: Vec<f64> = (0..2 * GRAPH_FEATURE_DIM).map(|i| ((i * 53 % 97) as f64 / 48.0) - 1.0).collect();
    let mut gap = one_hot_gap(1, 16).unwrap();
    gap.extend(one_hot_gap(3, 16).unwrap());
    let gap: Vec<f64> = gap.into_iter().map(f64::from).collect();
    let eps: Vec<f64> = (0..32).map(|i| ((i * 11 % 13) as f64 / 6.0) - 1.0).collect();
    let (x, y) = (t64(&x, &[2, 256]), t64(&y, &[2, 256]));
    let (gap, eps) = (t64(&gap, &[2, 16]), t64(&eps, &[2, 16]));
    let vars = model.store().vars();
    let loss = || model.loss(&x, &gap, &y, Some(&eps)).unwrap().0;
    check_gradients(&vars, &loss, 6, 1e-5);
}
