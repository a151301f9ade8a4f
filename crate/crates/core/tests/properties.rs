//! Property tests for the invariants of each module.

use std::collections::BTreeSet;
use std::sync::Arc;

use fedhero::autodiff::{grad_check, Tape};
use fedhero::eval::{accuracy, binary_auc, client_divergence, link_inference_attack};
use fedhero::experiment::ExperimentConfig;
use fedhero::federated::{aggregate_params, build_clients, run_rounds, AggregationScope, RunOptions};
use fedhero::graph::{Graph, NeighborLabelDistribution};
use fedhero::model::{
    build_latent_graph, pairwise_metric, smooth_loss, structure_learner_embed, Hyperparams, ModelParams,
    SL_HEADS,
};
use fedhero::partition::{
    balance_tolerance, balanced_partition, client_data_from_graphs, louvain_with_trace,
    make_federated_dataset, modularity,
};
use fedhero::sparse::SparseMatrix;
use fedhero::synthgen::{generate_conflicting_clients, generate_graph, GeneratorConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn graph_strategy(max_nodes: usize) -> impl Strategy<Value = Graph> {
    (4..max_nodes, 2usize..5).prop_flat_map(|(n, c)| {
        (
            proptest::collection::vec((0..n, 0..n), 0..n * 3),
            proptest::collection::vec(0..c, n),
            proptest::collection::vec(-2.0f64..2.0, n * 2),
        )
            .prop_map(move |(edges, labels, feats)| {
                let x = Array2::from_shape_vec((n, 2), feats).unwrap();
                Graph::from_edges(&edges, x, labels, c, true).unwrap()
            })
    })
}

fn synth(n: usize, c: usize, h: f64, deg: f64, fd: usize, seed: u64) -> Graph {
    generate_graph(&GeneratorConfig {
        num_nodes: n,
        num_classes: c,
        target_homophily: h,
        mean_degree: deg,
        feature_dim: fd,
        class_mixing: None,
        feature_separation: 1.0,
        seed,
    })
    .unwrap()
}

fn components(g: &Graph) -> Vec<Vec<usize>> {
    let mut seen = vec![false; g.num_nodes()];
    let mut out = Vec::new();
    for s in 0..g.num_nodes() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut i = 0;
        while i < comp.len() {
            for &v in g.neighbors(comp[i]) {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                }
            }
            i += 1;
        }
        out.push(comp);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn derived_graphs_validate(g in graph_strategy(30), p in 0.0f64..1.0, seed in any::<u64>()) {
        prop_assert!(g.validate().is_ok());
        prop_assert!(g.flip_edge_noise(p, seed).unwrap().validate().is_ok());
        let nodes: Vec<usize> = (0..g.num_nodes()).filter(|i| (seed >> (i % 64)) & 1 == 1).collect();
        if !nodes.is_empty() {
            prop_assert!(g.induced_subgraph(&nodes).unwrap().0.validate().is_ok());
        }
    }

    #[test]
    fn homophily_survives_relabeling(g in graph_strategy(30), shift in 0usize..4, rot in 0usize..30) {
        // Rename nodes by a rotation and classes by a cyclic shift.
        let n = g.num_nodes();
        let c = g.num_classes();
        let perm = |u: usize| (u + rot) % n;
        let edges: Vec<_> = g.edges().into_iter().map(|(u, v)| (perm(u), perm(v))).collect();
        let mut labels = vec![0; n];
        let mut feats = Array2::zeros((n, g.feature_dim()));
        for u in 0..n {
            labels[perm(u)] = (g.labels()[u] + shift) % c;
            feats.row_mut(perm(u)).assign(&g.features().row(u));
        }
        let h = Graph::from_edges(&edges, feats, labels, c, true).unwrap();
        match (g.edge_homophily(), h.edge_homophily()) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn neighbor_distribution_rows_are_stochastic(g in graph_strategy(30)) {
        let d = g.neighbor_label_distribution();
        let mut has_out = vec![false; g.num_classes()];
        for u in 0..g.num_nodes() {
            if g.degree(u) > 0 {
                has_out[g.labels()[u]] = true;
            }
        }
        for (k, row) in d.matrix.rows().into_iter().enumerate() {
            if has_out[k] {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_noise_is_identity(g in graph_strategy(30), seed in any::<u64>()) {
        prop_assert_eq!(g.flip_edge_noise(0.0, seed).unwrap(), g);
    }

    #[test]
    fn component_unions_keep_homophily(g in graph_strategy(30), pick in any::<u64>()) {
        let comps = components(&g);
        let mut nodes: Vec<usize> = comps
            .iter()
            .enumerate()
            .filter(|(i, _)| (pick >> (i % 64)) & 1 == 1)
            .flat_map(|(_, c)| c.iter().copied())
            .collect();
        nodes.sort_unstable();
        prop_assume!(!nodes.is_empty());
        let (sub, _) = g.induced_subgraph(&nodes).unwrap();
        // Edges of the chosen components only; recompute independently.
        let kept: BTreeSet<usize> = nodes.iter().copied().collect();
        let (mut same, mut total) = (0usize, 0usize);
        for (u, v) in g.edges() {
            if kept.contains(&u) {
                total += 1;
                same += usize::from(g.labels()[u] == g.labels()[v]);
            }
        }
        if total > 0 {
            prop_assert!((sub.edge_homophily().unwrap() - same as f64 / total as f64).abs() < 1e-12);
        } else {
            prop_assert!(sub.edge_homophily().is_err());
        }
    }

    #[test]
    fn louvain_trace_never_decreases(g in graph_strategy(40), seed in any::<u64>()) {
        prop_assume!(g.num_edges() > 0);
        let (pa, trace) = louvain_with_trace(&g, seed).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{:?}", trace);
        }
        let comm: Vec<usize> = {
            let mut c = vec![0; g.num_nodes()];
            for (k, members) in pa.members().iter().enumerate() {
                for &u in members {
                    c[u] = k;
                }
            }
            c
        };
        prop_assert!(modularity(&g, &comm) >= -1e-12);
    }

    #[test]
    fn federated_masks_partition_nodes(seed in any::<u64>(), m in 1usize..4) {
        let g = synth(60, 3, 0.4, 4.0, 3, seed % 1000);
        let pa = balanced_partition(&g, m, seed).unwrap();
        for d in make_federated_dataset(&g, &pa, seed).unwrap() {
            let s = &d.split;
            for i in 0..d.graph.num_nodes() {
                let hits = [s.train_mask[i], s.val_mask[i], s.test_mask[i]].iter().filter(|&&b| b).count();
                prop_assert_eq!(hits, 1);
            }
        }
    }

    #[test]
    fn softmax_and_cross_entropy(rows in 1usize..6, cols in 2usize..6, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = fedhero::rng::seeded(seed);
        let v = Array2::from_shape_fn((rows, cols), |_| rand::Rng::gen_range(&mut rng, -5.0..5.0));
        let labels = Arc::new((0..rows).map(|i| i % cols).collect::<Vec<_>>());
        let mask = Arc::new(vec![true; rows]);
        let mut t = Tape::new();
        let a = t.constant(v.clone()).unwrap();
        let s = t.softmax_rows(a).unwrap();
        for r in t.value(s).rows() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-9);
        }
        let l1 = t.masked_cross_entropy(a, Arc::clone(&labels), Arc::clone(&mask)).unwrap();
        let b = t.constant(v + shift).unwrap();
        let l2 = t.masked_cross_entropy(b, labels, mask).unwrap();
        prop_assert!((t.value(l1)[[0, 0]] - t.value(l2)[[0, 0]]).abs() < 1e-9);
    }

    #[test]
    fn identity_spmm_is_exact(rows in 1usize..8, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = fedhero::rng::seeded(seed);
        let d = Array2::from_shape_fn((rows, cols), |_| rand::Rng::gen_range(&mut rng, -3.0..3.0));
        let eye = SparseMatrix::identity(rows);
        let mut t = Tape::new();
        let vals = t.constant(Array2::from_shape_vec((rows, 1), eye.values.clone()).unwrap()).unwrap();
        let x = t.constant(d.clone()).unwrap();
        let y = t.spmm(vals, &eye.pattern, x).unwrap();
        prop_assert_eq!(t.value(y), &d);
    }

    #[test]
    fn fan_out_gradients_add(seed in any::<u64>()) {
        let mut rng = fedhero::rng::seeded(seed);
        let x = Array2::from_shape_fn((3, 4), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let w = Array2::from_shape_fn((4, 2), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let run = |f: bool, g: bool| {
            let mut t = Tape::new();
            let xv = t.param(x.clone()).unwrap();
            let wv = t.constant(w.clone()).unwrap();
            let mut terms = Vec::new();
            if f {
                let m = t.matmul(xv, wv).unwrap();
                let r = t.relu(m).unwrap();
                terms.push(t.sum(r).unwrap());
            }
            if g {
                let h = t.hadamard(xv, xv).unwrap();
                terms.push(t.sum(h).unwrap());
            }
            let loss = if terms.len() == 2 { t.add(terms[0], terms[1]).unwrap() } else { terms[0] };
            t.backward(loss).unwrap().get(xv).unwrap().clone()
        };
        prop_assert_eq!(run(true, true), run(true, false) + run(false, true));
    }

    #[test]
    fn primitive_gradients_match_differences(seed in any::<u64>()) {
        let mut rng = fedhero::rng::seeded(seed);
        let mut draw = |r: usize, c: usize| {
            // Values kept away from the relu kink.
            Array2::from_shape_fn((r, c), |_| {
                let x: f64 = rand::Rng::gen_range(&mut rng, 0.01..2.0);
                if rand::Rng::gen_bool(&mut rng, 0.5) { x } else { -x }
            })
        };
        let params = vec![("a".to_string(), draw(4, 3)), ("b".to_string(), draw(3, 2)), ("r".to_string(), draw(1, 2))];
        let report = grad_check(
            |t, p| {
                let m = t.matmul(p[0], p[1])?;
                let r = t.relu(m)?;
                let s = t.mul_row(r, p[2])?;
                let sm = t.softmax_rows(s)?;
                let q = t.hadamard(sm, s)?;
                t.sum(q)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn metric_symmetric_and_bounded(seed in 0u64..10_000, heads in 1usize..4) {
        let g = synth(20, 3, 0.3, 3.0, 4, seed);
        let hp = Hyperparams { num_heads: heads, hidden_dim: 5, k_neighbors: 3, ..Hyperparams::default() };
        let p = ModelParams::init(&hp, 4, 3, seed).unwrap();
        let z = structure_learner_embed(&p, &g).unwrap();
        let mut swapped = p.clone();
        {
            let w = p.block(SL_HEADS).unwrap();
            let s = swapped.block_mut(SL_HEADS).unwrap();
            for h in 0..heads {
                s.row_mut(h).assign(&w.row(heads + h));
                s.row_mut(heads + h).assign(&w.row(h));
            }
        }
        for (u, v) in [(0, 1), (2, 7), (5, 5), (19, 3)] {
            let a = pairwise_metric(&p, &hp, &z, u, v).unwrap();
            let b = pairwise_metric(&swapped, &hp, &z, v, u).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn smooth_loss_nonnegative_for_nonnegative_weights(seed in 0u64..10_000, lambda in 0.0f64..2.0, mu in 0.0f64..2.0) {
        let g = synth(20, 3, 0.3, 3.0, 4, seed);
        let hp = Hyperparams { hidden_dim: 5, k_neighbors: 4, ..Hyperparams::default() };
        let p = ModelParams::init(&hp, 4, 3, seed).unwrap();
        let z = structure_learner_embed(&p, &g).unwrap();
        let lg = build_latent_graph(&p, &z, &hp, None).unwrap();
        let pos = lg.with_weights(lg.weights().iter().map(|w| w.abs()).collect()).unwrap();
        prop_assert!(smooth_loss(&pos, g.features(), lambda, mu).unwrap() >= 0.0);
    }

    #[test]
    fn aggregate_stays_in_convex_hull(sizes in proptest::collection::vec(1usize..1000, 1..6), seed in any::<u64>()) {
        let hp = Hyperparams { hidden_dim: 3, num_heads: 2, ..Hyperparams::default() };
        let params: Vec<_> = (0..sizes.len())
            .map(|i| ModelParams::init(&hp, 3, 2, seed.wrapping_add(i as u64)).unwrap())
            .collect();
        let views: Vec<_> = params.iter().zip(&sizes).map(|(p, &n)| (p, n)).collect();
        let agg = aggregate_params(&views, AggregationScope::All).unwrap();
        for (name, value) in agg {
            for (idx, &x) in value.indexed_iter() {
                let vals: Vec<f64> = params.iter().map(|p| p.block(&name).unwrap()[idx]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(raw in proptest::collection::vec((0i32..40, 0usize..2), 2..40)) {
        prop_assume!(raw.iter().any(|r| r.1 == 1) && raw.iter().any(|r| r.1 == 0));
        let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 8.0).collect();
        let labels: Vec<usize> = raw.iter().map(|r| r.1).collect();
        let mask = vec![true; raw.len()];
        let base = binary_auc(&scores, &labels, &mask).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 - 1.0).collect();
        prop_assert_eq!(base, binary_auc(&moved, &labels, &mask).unwrap());
    }

    #[test]
    fn accuracy_ignores_row_shifts(vals in proptest::collection::vec(-16i32..16, 12), shifts in proptest::collection::vec(-8i32..8, 4)) {
        let logits = Array2::from_shape_fn((4, 3), |(i, j)| vals[i * 3 + j] as f64 / 4.0);
        let shifted = Array2::from_shape_fn((4, 3), |(i, j)| logits[[i, j]] + shifts[i] as f64 / 4.0);
        let labels = [0, 1, 2, 1];
        let mask = [true; 4];
        prop_assert_eq!(accuracy(&logits, &labels, &mask).unwrap(), accuracy(&shifted, &labels, &mask).unwrap());
    }

    #[test]
    fn lia_ignores_rotations(seed in 0u64..10_000, quarter_turns in 1usize..4) {
        let g = synth(40, 3, 0.5, 4.0, 3, seed);
        let emb = g.features().slice(ndarray::s![.., 0..2]).to_owned();
        let mut rot = emb.clone();
        for _ in 0..quarter_turns {
            let prev = rot.clone();
            for i in 0..rot.nrows() {
                rot[[i, 0]] = -prev[[i, 1]];
                rot[[i, 1]] = prev[[i, 0]];
            }
        }
        let pairs = 15.min(g.num_edges());
        prop_assert_eq!(
            link_inference_attack(&emb, &g, pairs, seed).unwrap(),
            link_inference_attack(&rot, &g, pairs, seed).unwrap()
        );
    }

    #[test]
    fn divergence_triangle_inequality(a in proptest::collection::vec(0.0f64..1.0, 27)) {
        let dists: Vec<_> = a
            .chunks(9)
            .map(|m| NeighborLabelDistribution { matrix: Array2::from_shape_vec((3, 3), m.to_vec()).unwrap() })
            .collect();
        let d = client_divergence(&dists).unwrap();
        prop_assert!(d[[0, 2]] <= d[[0, 1]] + d[[1, 2]] + 1e-12);
        prop_assert!(d[[0, 1]] >= 0.0 && d[[0, 0]] == 0.0);
    }

    #[test]
    fn config_round_trips(alpha in 0.0f64..=1.0, lambda in 0.0f64..3.0, k in 1usize..50, repeats in 1usize..8, seed in 0u64..(i64::MAX as u64)) {
        let mut cfg = ExperimentConfig::default();
        cfg.model.alpha = alpha;
        cfg.model.lambda_smooth = lambda;
        cfg.model.k_neighbors = k;
        cfg.experiment.repeats = repeats;
        cfg.experiment.seed = seed;
        let text = cfg.render().unwrap();
        prop_assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn balanced_parts_within_tolerance(seed in 0u64..10_000, n in 100usize..400, m in 2usize..9) {
        let g = synth(n, 4, 0.5, 5.0, 4, seed);
        let pa = balanced_partition(&g, m, seed).unwrap();
        let tol = balance_tolerance(n, m);
        for size in pa.sizes() {
            prop_assert!(size + tol >= n / m && size <= n.div_ceil(m) + tol, "{:?}", pa.sizes());
        }
    }

    #[test]
    fn realized_degree_close_to_target(seed in 0u64..10_000, deg in 4.0f64..20.0, h in 0.05f64..0.95) {
        let g = synth(1000, 5, h, deg, 5, seed);
        let realized = 2.0 * g.num_edges() as f64 / g.num_nodes() as f64;
        prop_assert!((realized - deg).abs() <= 0.1 * deg, "{realized} vs {deg}");
    }

    #[test]
    fn rounds_are_deterministic(seed in 0u64..1000) {
        let cfg = GeneratorConfig { num_nodes: 30, num_classes: 3, mean_degree: 4.0, feature_dim: 3, seed, ..GeneratorConfig::default() };
        let data = client_data_from_graphs(generate_conflicting_clients(&cfg, 2, 1.0).unwrap().graphs, seed).unwrap();
        let hp = Hyperparams { hidden_dim: 4, k_neighbors: 3, ..Hyperparams::default() };
        let opts = RunOptions { rounds: 3, seed, ..RunOptions::default() };
        let mut a = build_clients(&data, &hp, seed).unwrap();
        let mut b = build_clients(&data, &hp, seed).unwrap();
        let ha = run_rounds(&mut a, &hp, AggregationScope::GlobalChannelOnly, &opts).unwrap();
        let hb = run_rounds(&mut b, &hp, AggregationScope::GlobalChannelOnly, &opts).unwrap();
        prop_assert_eq!(ha.len(), hb.len());
        for (x, y) in ha.iter().zip(&hb) {
            prop_assert!(x.same_values(y));
        }
    }
}

#[test]
fn class_degrees_pass_chi_square() {
    // Total degree per class pooled over 20 graphs against equal expectation;
    // 13.28 is the 1% critical value with 4 degrees of freedom.
    let mut totals = [0.0f64; 5];
    for seed in 0..20 {
        let g = synth(1000, 5, 0.2, 10.0, 5, seed);
        for u in 0..g.num_nodes() {
            totals[g.labels()[u]] += g.degree(u) as f64;
        }
    }
    let expected = totals.iter().sum::<f64>() / 5.0;
    let chi2: f64 = totals.iter().map(|t| (t - expected).powi(2) / expected).sum();
    assert!(chi2 < 13.28, "chi-square {chi2} for {totals:?}");
}

#[test]
fn nearest_mean_accuracy_grows_with_separation() {
    let mut accs = Vec::new();
    for sep in [0.5, 1.0, 2.0] {
        let g = generate_graph(&GeneratorConfig {
            num_nodes: 2000,
            num_classes: 5,
            feature_dim: 8,
            feature_separation: sep,
            seed: 4,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let means = fedhero::synthgen::class_means(5, 8, sep);
        let correct = (0..g.num_nodes())
            .filter(|&u| {
                let x = g.features().row(u);
                let best = (0..5)
                    .min_by(|&a, &b| {
                        let da = (&x - &means.row(a)).mapv(|v| v * v).sum();
                        let db = (&x - &means.row(b)).mapv(|v| v * v).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == g.labels()[u]
            })
            .count();
        accs.push(correct as f64 / g.num_nodes() as f64);
    }
    assert!(accs[0] < accs[1] && accs[1] < accs[2], "{accs:?}");
}

#[test]
fn zero_conflict_uses_base_mixing() {
    let cfg = GeneratorConfig { seed: 8, ..GeneratorConfig::default() };
    let cc = generate_conflicting_clients(&cfg, 3, 0.0).unwrap();
    for (m, g) in cc.mixings.iter().zip(&cc.graphs) {
        assert_eq!(m, &cfg.mixing());
        assert!((g.edge_homophily().unwrap() - cfg.target_homophily).abs() < 0.05);
    }
}
