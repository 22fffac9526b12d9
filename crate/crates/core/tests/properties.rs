mod common;

use common::{all_assignments, all_labelings, labeled, random_instance};
use nmm::grad::Tape;
use nmm::graph::{load_edge_list, make_grid_graph, random_graph};
use nmm::kernel::{exact_marginal, log_joint, posterior_alpha, suff_stats, CountTable, EnumBudget, NmmParams};
use nmm::learning::{baselines, Baseline};
use nmm::parameterize::{BackboneConfig, BackboneKind, Parameterization};
use nmm::predict::{predict_exact_smallset, predict_marginal, ParticleSet, Weighting};
use nmm::rng::seeded;
use nmm::special::{digamma, log_beta, log_gamma};
use nmm::target::{exact_kl_nmm, exact_upper_bound, ising_log_partition, mean_field_fit, IsingModel};
use nmm::variational::{elbo_estimate, exact_bound, log_q_eval, next_permutation, q_conditional};
use nmm::{Graph, NodeSet};
use proptest::prelude::*;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn neighborhoods_are_self_inclusive_and_symmetric(seed in any::<u64>(), n in 1usize..12) {
        let g = random_graph(n, 0.4, 4, &mut seeded(seed));
        for i in 0..n {
            let hood = g.neighborhood(i).unwrap();
            prop_assert!(hood.contains(&i));
            prop_assert!(hood.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(hood.len() <= g.max_degree());
            for &j in hood {
                prop_assert!(g.neighborhood(j).unwrap().contains(&i));
            }
        }
    }

    #[test]
    fn edge_list_round_trip(seed in any::<u64>(), n in 2usize..15) {
        let g = random_graph(n, 0.3, 5, &mut seeded(seed));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tsv");
        g.save_edge_list(&path).unwrap();
        let back = load_edge_list(&path, n).unwrap();
        prop_assert_eq!(back.edges(), g.edges());
        prop_assert_eq!(back.fingerprint(), g.fingerprint());
    }

    #[test]
    fn grid_shape(h in 1usize..7, w in 1usize..7) {
        let g = make_grid_graph(h, w).unwrap();
        prop_assert_eq!(g.num_nodes(), h * w);
        prop_assert_eq!(g.num_edges(), h * (w - 1) + w * (h - 1));
        prop_assert!(g.max_degree() <= 5);
    }

    #[test]
    fn special_function_identities(x in 1e-3f64..1e4, a in prop::collection::vec(0.05f64..20.0, 2..5), k in 0usize..4) {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
        let lg = log_gamma(x + 1.0).unwrap() - log_gamma(x).unwrap();
        prop_assert!((lg - x.ln()).abs() <= 1e-10 * x.ln().abs().max(1.0));
        let h = 1e-5 * x.max(1e-2);
        let fd = (log_gamma(x + h).unwrap() - log_gamma(x - h.min(x / 2.0)).unwrap()) / (h + h.min(x / 2.0));
        prop_assert!((digamma(x).unwrap() - fd).abs() < 1e-6 * digamma(x).unwrap().abs().max(1.0) + 1e-4 * (x < 0.05) as u8 as f64);
        let k = k % a.len();
        let mut b = a.clone();
        b[k] += 1.0;
        let inc = log_beta(&b).unwrap() - log_beta(&a).unwrap();
        let total: f64 = a.iter().sum();
        let expect = a[k].ln() - total.ln();
        prop_assert!(rel(inc, expect) < 1e-10 || (inc - expect).abs() < 1e-12);
    }

    #[test]
    fn marginal_normalizes_and_bounds_each_joint(seed in any::<u64>(), n in 1usize..5, c in 2usize..4) {
        let (g, p) = random_instance(seed, n, c, 4);
        let nodes: Vec<usize> = (0..n).collect();
        let mut total = 0.0;
        for ys in all_labelings(n, c) {
            let y = labeled(&g, &nodes, &ys, c);
            let lm = exact_marginal(&g, &p, &y).unwrap();
            total += lm.exp();
            for assign in all_assignments(&g, &nodes) {
                prop_assert!(log_joint(&g, &p, &y, &assign).unwrap() <= lm + 1e-12);
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-9, "sum {}", total);
    }

    #[test]
    fn incremental_joint_identity(seed in any::<u64>(), n in 2usize..6, c in 2usize..4) {
        let (g, p) = random_instance(seed, n, c, 4);
        let mut rng = seeded(seed ^ 1);
        let nodes: Vec<usize> = (0..n).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let assigns = all_assignments(&g, &nodes);
        let full = &assigns[rng.random_range(0..assigns.len())];
        let head = labeled(&g, &nodes[..n - 1], &ys[..n - 1], c);
        let head_c = nmm::NeighborAssignment(full.0[..n - 1].to_vec());
        let before = log_joint(&g, &p, &head, &head_c).unwrap();
        let after = log_joint(&g, &p, &labeled(&g, &nodes, &ys, c), full).unwrap();
        let counts = suff_stats(n, c, &head, &head_c).unwrap();
        let (i, yi, j) = (n - 1, ys[n - 1], full.0[n - 1]);
        let pos = g.hood_position(i, j).unwrap();
        let expect = p.attn(i)[pos].ln() + (p.alpha(j)[yi] + counts.count(j, yi) as f64).ln()
            - (p.alpha_total(j) + counts.total(j) as f64).ln();
        prop_assert!((after - before - expect).abs() < 1e-10);
    }

    #[test]
    fn identity_attention_marginal_is_independent(seed in any::<u64>(), n in 1usize..6, c in 2usize..4) {
        let (g, p0) = random_instance(seed, n, c, 4);
        let p = NmmParams::independent(&g, c, p0.alpha_flat().to_vec()).unwrap();
        let mut rng = seeded(seed ^ 2);
        let nodes: Vec<usize> = (0..n).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let lm = exact_marginal(&g, &p, &labeled(&g, &nodes, &ys, c)).unwrap();
        let expect: f64 = (0..n).map(|i| (p.alpha(i)[ys[i]] / p.alpha_total(i)).ln()).sum();
        prop_assert!((lm - expect).abs() < 1e-12);
    }

    #[test]
    fn posterior_alpha_adds_counts(seed in any::<u64>(), n in 1usize..6) {
        let (g, p) = random_instance(seed, n, 2, 4);
        let nodes: Vec<usize> = (0..n).collect();
        let ys: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y = labeled(&g, &nodes, &ys, 2);
        let c = &all_assignments(&g, &nodes)[0];
        let post = posterior_alpha(&g, &p, &y, c).unwrap();
        let counts = suff_stats(n, 2, &y, c).unwrap();
        for j in 0..n {
            for k in 0..2 {
                prop_assert_eq!(post[2 * j + k], p.alpha(j)[k] + counts.count(j, k) as f64);
            }
        }
    }

    #[test]
    fn q_conditionals_normalize_and_match_joint_ratios(seed in any::<u64>(), n in 2usize..5, c in 2usize..4) {
        let (g, p) = random_instance(seed, n, c, 4);
        let mut rng = seeded(seed ^ 3);
        let nodes: Vec<usize> = (0..n).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let prefix = &all_assignments(&g, &nodes[..n - 1])[0];
        let head = labeled(&g, &nodes[..n - 1], &ys[..n - 1], c);
        let counts = suff_stats(n, c, &head, prefix).unwrap();
        let i = n - 1;
        let q = q_conditional(&g, &p, &counts, i, ys[i]).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let full = labeled(&g, &nodes, &ys, c);
        let lj: Vec<f64> = g.neighborhood(i).unwrap().iter().map(|&j| {
            let mut a = prefix.0.clone();
            a.push(j);
            log_joint(&g, &p, &full, &nmm::NeighborAssignment(a)).unwrap()
        }).collect();
        let m = lj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lj.iter().map(|x| (x - m).exp()).sum();
        for (qk, l) in q.iter().zip(&lj) {
            prop_assert!((qk - (l - m).exp() / z).abs() < 1e-10);
        }
        let _ = CountTable::new(n, c);
    }

    #[test]
    fn log_q_sums_to_one_for_a_fixed_order(seed in any::<u64>(), n in 1usize..5, c in 2usize..4) {
        let (g, p) = random_instance(seed, n, c, 4);
        let mut rng = seeded(seed ^ 4);
        let nodes: Vec<usize> = (0..n).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y = labeled(&g, &nodes, &ys, c);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let total: f64 = all_assignments(&g, &nodes)
            .iter()
            .map(|a| log_q_eval(&g, &p, &y, a, &order).unwrap().0.exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_averaged_bound_is_a_lower_bound(seed in any::<u64>(), n in 1usize..4, c in 2usize..4) {
        let (g, p) = random_instance(seed, n, c, 3);
        let mut rng = seeded(seed ^ 5);
        let nodes: Vec<usize> = (0..n).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y = labeled(&g, &nodes, &ys, c);
        let lb = exact_bound(&g, &p, &y, EnumBudget::default()).unwrap();
        let lm = exact_marginal(&g, &p, &y).unwrap();
        prop_assert!(lb <= lm + 1e-12);
        if n == 1 {
            prop_assert!((lb - lm).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_is_deterministic_per_seed(seed in any::<u64>(), n in 1usize..6) {
        let (g, p) = random_instance(seed, n, 2, 4);
        let nodes: Vec<usize> = (0..n).collect();
        let ys: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y = labeled(&g, &nodes, &ys, 2);
        let a = elbo_estimate(&g, &p, &y, 16, seed).unwrap();
        let b = elbo_estimate(&g, &p, &y, 16, seed).unwrap();
        prop_assert_eq!(a.per_sample, b.per_sample);
    }

    #[test]
    fn loo_baseline_ignores_constant_shifts(f in prop::collection::vec(-50f64..50.0, 2..10), shift in -100f64..100.0) {
        let g: Vec<f64> = f.iter().map(|x| x + shift).collect();
        let bf = baselines(&f, Baseline::Loo);
        let bg = baselines(&g, Baseline::Loo);
        for k in 0..f.len() {
            prop_assert!(((f[k] - bf[k]) - (g[k] - bg[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn parameterized_attention_is_a_distribution(seed in any::<u64>(), n in 1usize..10, kind in 0usize..3) {
        let mut rng = seeded(seed);
        let g = random_graph(n, 0.4, 4, &mut rng);
        let feats: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = g.with_features(nmm::graph::Features::new(n, 3, feats).unwrap()).unwrap();
        let kind = [BackboneKind::Free, BackboneKind::Linear, BackboneKind::OneHop][kind];
        let cfg = BackboneConfig { kind, embed_dim: 4, hidden: 5, init_gamma: rng.random_range(-2.0..2.0), ..Default::default() };
        let par = Parameterization::new(cfg, &g, 3).unwrap();
        let mut theta = par.init_theta(&mut rng);
        for t in theta.iter_mut() {
            *t += rng.random_range(-0.5..0.5);
        }
        let p = par.params(&g, &theta).unwrap();
        for i in 0..n {
            let s: f64 = p.attn(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.attn(i).iter().all(|&l| l >= 0.0));
            prop_assert!(p.alpha(i).iter().all(|&a| a > 1.0 - 1e-12));
        }
    }

    #[test]
    fn cosine_is_symmetric(a in prop::collection::vec(-3f64..3.0, 4), b in prop::collection::vec(-3f64..3.0, 4)) {
        let mut t = Tape::new();
        let va = t.vars(&a);
        let vb = t.vars(&b);
        let x = t.cosine(&va, &vb);
        let y = t.cosine(&vb, &va);
        prop_assert_eq!(t.value(x), t.value(y));
    }

    #[test]
    fn predictions_are_distributions(seed in any::<u64>(), n in 2usize..6) {
        let (g, p) = random_instance(seed, n, 3, 4);
        let y = labeled(&g, &[0], &[1], 3);
        let ps = ParticleSet::sample(&g, &p, &y, 20, seed, Weighting::Uniform).unwrap();
        let m = predict_marginal(&g, &p, &ps, n - 1).unwrap();
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let kappa = NodeSet::new((1..n.min(3)).collect(), n).unwrap();
        let post = predict_exact_smallset(&g, &p, &y, &kappa, EnumBudget::default()).unwrap();
        prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shared_neighbors_correlate_positively(seed in any::<u64>(), a in 0.3f64..5.0, k in 0usize..2) {
        // Two nodes with a common neighbor and symmetric α everywhere.
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut rng = seeded(seed);
        let mut attn = Vec::new();
        for i in 0..3 {
            let w: Vec<f64> = g.neighborhood(i).unwrap().iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            attn.extend(w.iter().map(|x| x / s));
        }
        let p = NmmParams::new(&g, 2, vec![a; 6], attn).unwrap();
        let given = labeled(&g, &[0], &[k], 2);
        let post = predict_exact_smallset(&g, &p, &given, &NodeSet::new(vec![2], 3).unwrap(), EnumBudget::default()).unwrap();
        let prior = predict_exact_smallset(&g, &p, &nmm::LabeledNodes::empty(), &NodeSet::new(vec![2], 3).unwrap(), EnumBudget::default()).unwrap();
        prop_assert!(post.marginal(0)[k] >= prior.marginal(0)[k] - 1e-12);
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn mean_field_free_energy_never_increases(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let g = make_grid_graph(3, 3).unwrap();
        let h: Vec<f64> = (0..9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let j: Vec<f64> = (0..g.num_edges()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = IsingModel::new(g, h, &j).unwrap();
        let fit = mean_field_fit(&m, 10_000, 1e-8).unwrap();
        for w in fit.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(fit.free_energy >= -ising_log_partition(&m).unwrap() - 1e-12);
    }

    #[test]
    fn upper_bound_dominates_the_exact_kl(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let g = make_grid_graph(2, 2).unwrap();
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let j: Vec<f64> = (0..g.num_edges()).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = IsingModel::new(g.clone(), h, &j).unwrap();
        let (_, p) = random_instance(seed, 4, 2, 3);
        // Reuse α and random attention on the grid.
        let mut attn = Vec::new();
        for i in 0..4 {
            let w: Vec<f64> = g.neighborhood(i).unwrap().iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            attn.extend(w.iter().map(|x| x / s));
        }
        let alpha: Vec<f64> = p.alpha_flat().iter().map(|a| a + 1.0).collect();
        let q = NmmParams::new(&g, 2, alpha, attn).unwrap();
        let (kl, log_z) = exact_kl_nmm(&m, &g, &q).unwrap();
        let ub = exact_upper_bound(&m, &g, &q).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!(ub + log_z >= kl - 1e-9);
    }
}

#[test]
fn permutations_cover_the_symmetric_group() {
    let mut xs = vec![0, 1, 2, 3];
    let mut count = 1;
    while next_permutation(&mut xs) {
        count += 1;
    }
    assert_eq!(count, 24);
}
