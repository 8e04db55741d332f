use std::collections::{BTreeSet, VecDeque};

use dpda::blocks;
use dpda::graph::lambda2;
use dpda::mixing::{
    approx_average_undirected, decay_profile, directed_weights, estimate_decay, exact_average, metropolis_weights,
    push_sum, weights, Messenger, MixingMatrix,
};
use dpda::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn bfs_connected(g: &Graph) -> bool {
    let n = g.node_count();
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in g.edges() {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn random_blocks(nodes: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..nodes)
        .map(|_| {
            DVector::from_fn(dim, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
        })
        .collect()
}

fn random_digraph(nodes: usize, seed: u64) -> Graph {
    // A directed ring keeps it strongly connected; extra arcs come from a hash.
    let mut arcs: BTreeSet<(usize, usize)> = (0..nodes).map(|i| (i, (i + 1) % nodes)).collect();
    for i in 0..nodes {
        for j in 0..nodes {
            let h = (i as u64 * 31 + j as u64 * 17 + (seed % 1000) * 101) % 7;
            if i != j && h == 0 {
                arcs.insert((i, j));
            }
        }
    }
    Graph::new(nodes, arcs.into_iter().collect(), true).unwrap()
}

fn graph_params() -> impl Strategy<Value = (usize, usize, u64)> {
    (4usize..14).prop_flat_map(|n| (Just(n), n..=n * (n - 1) / 2, any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn incidence_gram_is_the_laplacian((n, e, seed) in graph_params(), dim in 1usize..4) {
        let g = Graph::small_world(n, e, seed).unwrap();
        prop_assert!(bfs_connected(&g));
        prop_assert_eq!(g.edge_count(), e);
        let h = g.incidence().unwrap();
        let omega = g.laplacian().unwrap();
        prop_assert!((h.tr_mul(&h) - &omega).amax() <= 1e-12);
        let eye = DMatrix::<f64>::identity(dim, dim);
        let m = h.kronecker(&eye);
        prop_assert!((m.tr_mul(&m) - omega.kronecker(&eye)).amax() <= 1e-12);
        prop_assert!(lambda2(&omega).unwrap() > 0.0);
    }

    #[test]
    fn metropolis_is_symmetric_doubly_stochastic((n, e, seed) in graph_params()) {
        let g = Graph::small_world(n, e, seed).unwrap();
        let v = metropolis_weights(&g).unwrap().entries;
        prop_assert!((&v - v.transpose()).amax() <= 1e-15);
        for i in 0..n {
            prop_assert!((v.row(i).sum() - 1.0).abs() <= 1e-12);
            for j in 0..n {
                prop_assert!(v[(i, j)] >= 0.0);
                let linked = i == j || g.neighbors(i).contains(&j);
                prop_assert_eq!(v[(i, j)] > 0.0, linked);
            }
        }
    }

    #[test]
    fn pushsum_weights_are_column_stochastic(n in 3usize..14, seed in 0u64..1000) {
        let g = random_digraph(n, seed);
        let v = directed_weights(&g).unwrap().entries;
        for j in 0..n {
            prop_assert!((v.column(j).sum() - 1.0).abs() <= 1e-12);
            prop_assert!(v[(j, j)] > 0.0);
            for i in 0..n {
                prop_assert!(v[(i, j)] >= 0.0);
                if i != j {
                    prop_assert_eq!(v[(i, j)] > 0.0, g.out_neighbors(j).contains(&i));
                }
            }
        }
    }

    #[test]
    fn plan_windows_cover_the_base((n, e, seed) in graph_params(), m in 1usize..6, p in 0.05f64..1.0, w in 0usize..50) {
        let base = Graph::small_world(n, e, seed).unwrap();
        let plan = TimeVaryingGraphPlan::new(base.clone(), m, p, seed).unwrap();
        let window = plan.window(w);
        prop_assert_eq!(window.len(), m);
        let union: BTreeSet<_> = window.iter().flat_map(|g| g.edges().iter().copied()).collect();
        let expected: BTreeSet<_> = base.edges().iter().copied().collect();
        prop_assert_eq!(union, expected);
        for g in &window[..m - 1] {
            prop_assert_eq!(g.edge_count(), plan.sample_size());
        }
    }

    #[test]
    fn consensus_inputs_are_fixed_points((n, e, seed) in graph_params(), q in 0usize..20, dim in 1usize..4) {
        let w = random_blocks(1, dim, seed).pop().unwrap();
        let omega = blocks::replicate(n, &w);
        let plan = TimeVaryingGraphPlan::new(Graph::small_world(n, e, seed).unwrap(), 3, 0.5, seed).unwrap();
        let seq: Vec<MixingMatrix> = (1..=q).map(|t| metropolis_weights(&plan.sample(t)).unwrap()).collect();
        let out = approx_average_undirected(&seq, &omega, &mut Messenger::new()).unwrap();
        prop_assert!(blocks::dist(&out, &omega) <= 1e-12 * w.norm());

        let dg = random_digraph(n, seed);
        let dplan = TimeVaryingGraphPlan::new(dg, 3, 0.5, seed).unwrap();
        let dseq: Vec<MixingMatrix> = (1..=q).map(|t| directed_weights(&dplan.sample(t)).unwrap()).collect();
        let out = push_sum(&dseq, &omega, &mut Messenger::new()).unwrap();
        prop_assert!(blocks::dist(&out, &omega) <= 1e-12 * w.norm() * (n as f64).sqrt());
    }
}

/// `diag(W 1)^{-1} W omega` with the dense product `W = V^q ... V^1`.
fn dense_pushsum(seq: &[MixingMatrix], omega: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = omega.len();
    let mut w = DMatrix::<f64>::identity(n, n);
    for v in seq {
        w = &v.entries * w;
    }
    let ones = &w * DVector::from_element(n, 1.0);
    (0..n)
        .map(|i| {
            let mut acc = DVector::zeros(omega[0].len());
            for (j, oj) in omega.iter().enumerate() {
                acc += oj * w[(i, j)];
            }
            acc / ones[i]
        })
        .collect()
}

#[test]
fn message_passing_pushsum_matches_dense_product() {
    for trial in 0..20u64 {
        let n = 4 + (trial as usize % 9);
        let plan = TimeVaryingGraphPlan::new(random_digraph(n, trial), 1 + trial as usize % 4, 0.4, trial).unwrap();
        let q = 1 + trial as usize * 2;
        let seq: Vec<MixingMatrix> =
            (1..=q).map(|t| weights(&plan.sample(t + trial as usize), MixingKind::DirectedPushsum).unwrap()).collect();
        let omega = random_blocks(n, 3, trial);
        let fast = push_sum(&seq, &omega, &mut Messenger::new()).unwrap();
        let slow = dense_pushsum(&seq, &omega);
        assert!(blocks::dist(&fast, &slow) <= 1e-12 * blocks::norm(&omega), "trial {trial}");
    }
}

#[test]
fn metropolis_averaging_matches_dense_product() {
    let plan = TimeVaryingGraphPlan::new(Graph::small_world(9, 14, 3).unwrap(), 4, 0.3, 3).unwrap();
    let seq: Vec<MixingMatrix> = (1..=12).map(|t| metropolis_weights(&plan.sample(t)).unwrap()).collect();
    let omega = random_blocks(9, 2, 7);
    let mut flat = DMatrix::from_fn(9, 2, |i, c| omega[i][c]);
    for v in &seq {
        flat = &v.entries * flat;
    }
    let out = approx_average_undirected(&seq, &omega, &mut Messenger::new()).unwrap();
    for (i, b) in out.iter().enumerate() {
        assert!((b[0] - flat[(i, 0)]).abs() + (b[1] - flat[(i, 1)]).abs() <= 1e-12);
    }
    let mean = exact_average(&omega);
    assert!(blocks::dist(&out, &mean) < blocks::dist(&omega, &mean));
}

#[test]
fn residual_decays_geometrically_on_connected_plans() {
    let m = 4;
    let cases = [
        (
            GraphSource::Plan(TimeVaryingGraphPlan::new(Graph::small_world(10, 18, 1).unwrap(), m, 0.5, 1).unwrap()),
            MixingKind::Metropolis,
        ),
        (
            GraphSource::Plan(TimeVaryingGraphPlan::new(Graph::paper_directed(), m, 0.5, 2).unwrap()),
            MixingKind::DirectedPushsum,
        ),
    ];
    for (source, kind) in cases {
        let profile = decay_profile(&source, kind, 60, 40, 5).unwrap();
        // Per-round monotonicity can fail for push-sum, but a full window of
        // rounds never increases the worst-case residual.
        for q in 2 * m..profile.len() {
            assert!(profile[q] <= profile[q - m] * (1.0 + 1e-9), "{kind:?} q={q}: {profile:?}");
        }
        if kind == MixingKind::Metropolis {
            assert!(profile.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
        let fit = estimate_decay(&source, kind, 60, 40, 5).unwrap();
        assert!(fit.beta < 1.0 && fit.beta > 0.0, "{fit:?}");
        assert!(profile[59] < 1e-3 * profile[0]);
    }
}
