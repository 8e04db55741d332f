mod common;

use common::*;
use dpda::blocks::{self, Blocks};
use dpda::dpda_static::run_from;
use dpda::problems::{gen_classo_instance, ClassoVariant};
use dpda::schedule::check_static_conditions;
use dpda::*;
use nalgebra::{DMatrix, DVector};

fn run_opts(stride: usize) -> RunOptions {
    RunOptions { stride, check_conditions: true, ..Default::default() }
}

#[test]
fn single_node_reduces_to_accelerated_proximal_gradient() {
    let a = v(&[1.5, -2.0, 0.25]);
    let inst = proximity_instance(std::slice::from_ref(&a), &[1.0], ProxFn::Zero);
    let g = Graph::new(1, vec![], false).unwrap();
    let p = AlgoParams::static_defaults(&inst, 0, BPolicy::AffineZero);
    let mut st = dpda_init(&inst, &g, &p, None).unwrap();
    let mut errs = Vec::new();
    for _ in 0..2000 {
        dpda_step(&inst, &mut st).unwrap();
        errs.push((&st.x[0] - &a).norm());
    }
    // x+ - a = (1 - tau^k)(x - a) with tau^k ~ 2/(mu k): monotone, O(1/k^2).
    assert!(errs.windows(2).all(|w| w[1] < w[0]));
    let pts: Vec<(f64, f64)> = (200..2000).step_by(20).map(|k| ((k + 1) as f64, errs[k])).collect();
    let slope = dpda::metrics::rate_fit(&pts).unwrap();
    assert!(slope < -1.9, "slope {slope}");
    assert!(errs[1999] < 1e-4);
}

#[test]
fn two_node_path_reaches_average() {
    let (a1, a2) = (v(&[1.0, 0.0]), v(&[3.0, -4.0]));
    let inst = proximity_instance(&[a1.clone(), a2.clone()], &[1.0, 1.0], ProxFn::Zero);
    let g = Graph::path(2);
    let p = AlgoParams::static_defaults(&inst, 1, BPolicy::AffineZero);
    let mut st = dpda_init(&inst, &g, &p, None).unwrap();
    for _ in 0..10_000 {
        dpda_step(&inst, &mut st).unwrap();
    }
    let target = (a1 + a2) / 2.0;
    for x in &st.x {
        assert!((x - &target).norm() < 1e-5, "{x} vs {target}");
    }
}

#[test]
fn classo_converges_to_oracle() {
    let inst = with_reference(gen_classo_instance(8, 10, 4, 0.1, 3, ClassoVariant::I).unwrap());
    let g = Graph::small_world(4, 5, 3).unwrap();
    let p = AlgoParams::static_defaults(&inst, g.max_degree(), BPolicy::AffineZero);
    let tr = run_dpda(&inst, &g, 3000, &p, None, &run_opts(100)).unwrap();
    let x_star = &inst.reference.as_ref().unwrap().x_star;
    assert!(dpda::metrics::relative_error(&tr.final_x, x_star).unwrap() < 1e-5);
    assert!(tr.condition_failures.is_empty());
}

#[test]
fn init_defaults() {
    let inst = gen_classo_instance(6, 8, 3, 0.1, 1, ClassoVariant::I).unwrap();
    let g = Graph::complete(3);
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let st = dpda_init(&inst, &g, &p, None).unwrap();
    assert!(st.theta.iter().all(|t| t.iter().all(|&c| c == 0.0)));
    assert_eq!(st.theta, st.theta_prev);
    assert_eq!(st.x, st.x_prev);
    assert!(st.s.iter().all(|s| s.norm() == 0.0));
    // Every agent strongly convex: no consensus penalty.
    assert_eq!(st.alpha, 0.0);
    assert_eq!(st.b, 0.0);
    assert_eq!(st.steps.mu(), inst.ubar_mu);
}

#[test]
fn init_rejects_bad_networks_and_starts() {
    let inst = gen_classo_instance(6, 8, 3, 0.1, 1, ClassoVariant::I).unwrap();
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let split = Graph::new(3, vec![(0, 1)], false).unwrap();
    assert_eq!(dpda_init(&inst, &split, &p, None).unwrap_err(), Error::Disconnected);
    let directed = Graph::new(3, vec![(0, 1), (1, 2), (2, 0)], true).unwrap();
    assert!(matches!(dpda_init(&inst, &directed, &p, None), Err(Error::GraphKind { .. })));
    let far = blocks::replicate(3, &DVector::from_element(6, 1e6));
    assert!(matches!(dpda_init(&inst, &Graph::complete(3), &p, Some(&far)), Err(Error::InvalidArgument(_))));
    let ell = gen_ellipsoid_instance(4, 3, 2.0, 1).unwrap();
    let pe = AlgoParams::static_defaults(&ell, 2, BPolicy::AffineZero);
    assert!(dpda_init(&ell, &Graph::complete(3), &pe, None).is_err());
}

#[test]
fn nonsmooth_agents_get_consensus_penalty() {
    let inst = gen_classo_instance(6, 8, 3, 0.1, 2, ClassoVariant::II).unwrap();
    let g = Graph::path(3);
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let st = dpda_init(&inst, &g, &p, None).unwrap();
    let lambda2 = 1.0; // path on three nodes
    let threshold = 4.0 * 3.0 * inst.bar_l.powi(2) / (inst.bar_mu * lambda2);
    assert!((st.alpha - 1.025 * threshold).abs() < 1e-9 * st.alpha);
    assert!(st.steps.mu() > 0.0);
}

#[test]
fn stride_and_record_counts() {
    let inst = gen_classo_instance(5, 6, 3, 0.1, 4, ClassoVariant::I).unwrap();
    let g = Graph::complete(3);
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    for (k, r, expect) in [(50, 1, 50), (50, 7, 8), (49, 7, 7), (1, 3, 1)] {
        let tr = run_dpda(&inst, &g, k, &p, None, &RunOptions { stride: r, ..Default::default() }).unwrap();
        assert_eq!(tr.records.len(), expect, "K = {k}, stride = {r}");
        assert!(tr.records.windows(2).all(|w| w[0].k < w[1].k && w[0].t_k <= w[1].t_k));
    }
    assert!(run_dpda(&inst, &g, 0, &p, None, &RunOptions::default()).is_err());
}

#[test]
fn n_k_counts_iterations_at_constant_gamma() {
    // mu = 0 is impossible for a valid instance, so pin it through the state.
    let inst = gen_classo_instance(5, 6, 3, 0.1, 4, ClassoVariant::I).unwrap();
    let g = Graph::complete(3);
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let mut st = dpda_init(&inst, &g, &p, None).unwrap();
    st.steps.params.mu = 0.0;
    st.steps = st.steps.clone().with_tilde_tau(st.steps.tilde_tau);
    let tr = run_from(&inst, &mut st, 37, &RunOptions::default()).unwrap();
    assert!((tr.n_k - 37.0).abs() < 1e-12);
}

#[test]
fn distance_monitor_stays_bounded() {
    let inst = with_reference(gen_classo_instance(6, 8, 4, 0.1, 7, ClassoVariant::I).unwrap());
    let g = Graph::cycle(4).unwrap();
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let tr = run_dpda(&inst, &g, 2000, &p, None, &run_opts(1)).unwrap();
    let mon: Vec<f64> = tr.records.iter().map(|r| r.distance_monitor.unwrap()).collect();
    let first = mon[0];
    let peak = mon.iter().cloned().fold(0.0, f64::max);
    assert!(peak.is_finite() && peak <= 10.0 * first.max(mon[1]), "monitor peaked at {peak} (start {first})");
    // The tail must not drift upward.
    assert!(mon[1999] <= mon[999] * 1.5);
}

#[test]
fn duals_stay_in_dual_cone_and_s_accumulates() {
    let inst = gen_classo_instance(6, 8, 3, 0.2, 5, ClassoVariant::II).unwrap();
    let g = Graph::path(3);
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let mut st = dpda_init(&inst, &g, &p, None).unwrap();
    for _ in 0..300 {
        let (s_old, gamma) = (st.s.clone(), st.steps.gamma);
        let before = st.steps.clone();
        dpda_step(&inst, &mut st).unwrap();
        assert!(st.theta.iter().flat_map(|t| t.iter()).all(|&c| c >= 0.0));
        for ((s, old), x) in st.s.iter().zip(&s_old).zip(&st.x) {
            assert_eq!(*s, old + x * gamma);
        }
        assert!(check_static_conditions(&before, &st.steps, &inst, 2).all_pass());
    }
}

/// The same recursion written with one dual vector per edge,
/// `lambda^{k+1} = lambda^k + gamma^k M x^{k+1}`, using dense stacked operators.
struct EdgeDualShadow {
    m: DMatrix<f64>,
    x: DVector<f64>,
    x_prev: DVector<f64>,
    theta: Blocks,
    theta_prev: Blocks,
    lambda: DVector<f64>,
    lambda_prev: DVector<f64>,
}

impl EdgeDualShadow {
    fn new(graph: &Graph, x0: &[DVector<f64>], theta0: &[DVector<f64>]) -> Self {
        let n = x0[0].len();
        let m = graph.incidence().unwrap().kronecker(&DMatrix::identity(n, n));
        let rows = m.nrows();
        EdgeDualShadow {
            x: blocks::flatten(x0),
            x_prev: blocks::flatten(x0),
            theta: theta0.to_vec(),
            theta_prev: theta0.to_vec(),
            lambda: DVector::zeros(rows),
            lambda_prev: DVector::zeros(rows),
            m,
        }
    }

    fn step(&mut self, inst: &Instance, steps: &StepState, alpha: f64) {
        let nodes = inst.node_count();
        let n = inst.dim();
        let eta = steps.eta;
        let omega = self.m.transpose() * &self.m;
        let dual = self.m.transpose() * (&self.lambda * (1.0 + eta) - &self.lambda_prev * eta);
        let penalty = &omega * &self.x * alpha;
        let xs = blocks::unflatten(&self.x, nodes);
        let xs_prev = blocks::unflatten(&self.x_prev, nodes);
        let mut next = Vec::new();
        let mut theta_next = Vec::new();
        for (i, a) in inst.agents.iter().enumerate() {
            let mut grad = a.f_grad(&xs[i]) + dual.rows(i * n, n) + penalty.rows(i * n, n);
            if a.constraint_dim() > 0 {
                grad +=
                    a.jt_mul(&xs[i], &self.theta[i]) * (1.0 + eta) - a.jt_mul(&xs_prev[i], &self.theta_prev[i]) * eta;
            }
            let xi = a.rho.prox(&(&xs[i] - grad * steps.tau), steps.tau).unwrap();
            theta_next.push(if a.constraint_dim() > 0 {
                a.cone.project_dual(&(&self.theta[i] + a.g_value(&xi) * steps.kappa[i]))
            } else {
                self.theta[i].clone()
            });
            next.push(xi);
        }
        let x_new = blocks::flatten(&next);
        let lambda_new = &self.lambda + &self.m * &x_new * steps.gamma;
        self.lambda_prev = std::mem::replace(&mut self.lambda, lambda_new);
        self.x_prev = std::mem::replace(&mut self.x, x_new);
        self.theta_prev = std::mem::replace(&mut self.theta, theta_next);
    }
}

#[test]
fn edge_duals_match_the_accumulated_sums() {
    for (variant, seed) in [(ClassoVariant::I, 11), (ClassoVariant::II, 12)] {
        let inst = gen_classo_instance(5, 7, 4, 0.1, seed, variant).unwrap();
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (0, 2)], false).unwrap();
        let p = AlgoParams::static_defaults(&inst, g.max_degree(), BPolicy::AffineZero);
        let mut st = dpda_init(&inst, &g, &p, None).unwrap();
        let mut shadow = EdgeDualShadow::new(&g, &st.x, &st.theta);
        let omega = shadow.m.transpose() * &shadow.m;
        for k in 0..500 {
            let steps = st.steps.clone();
            dpda_step(&inst, &mut st).unwrap();
            shadow.step(&inst, &steps, st.alpha);
            let scale = 1f64.max(shadow.lambda.norm());
            let mt_lambda = shadow.m.transpose() * &shadow.lambda;
            let lap_s = &omega * blocks::flatten(&st.s);
            assert!((mt_lambda - lap_s).norm() <= 1e-10 * scale, "k = {k}");
            let dx = (&shadow.x - blocks::flatten(&st.x)).norm();
            assert!(dx <= 1e-10 * 1f64.max(shadow.x.norm()), "k = {k}: iterates differ by {dx}");
        }
    }
}

#[test]
fn reads_only_neighbour_messages() {
    let inst = gen_classo_instance(5, 6, 6, 0.1, 9, ClassoVariant::II).unwrap();
    let g = Graph::small_world(6, 8, 9).unwrap();
    let p = AlgoParams::static_defaults(&inst, g.max_degree(), BPolicy::AffineZero);
    let mut st = dpda_init(&inst, &g, &p, None).unwrap().with_access_log();
    for _ in 0..25 {
        dpda_step(&inst, &mut st).unwrap();
    }
    assert_eq!(st.messenger().rounds(), 25);
    let log = st.messenger().log().unwrap();
    let per_round: usize = (0..6).map(|i| g.degree(i)).sum();
    assert_eq!(log.len(), 25 * per_round);
    for &(round, i, j) in log {
        assert!(round < 25);
        assert!(g.neighbors(i).contains(&j), "node {i} read node {j}");
    }
}

#[test]
fn updates_ignore_non_neighbour_state() {
    let inst = gen_classo_instance(5, 6, 5, 0.1, 21, ClassoVariant::II).unwrap();
    let g = Graph::path(5);
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let mut st = dpda_init(&inst, &g, &p, None).unwrap();
    for _ in 0..10 {
        dpda_step(&inst, &mut st).unwrap();
    }
    let mut reference = st.clone();
    dpda_step(&inst, &mut reference).unwrap();
    // Node 0 only talks to node 1; scramble nodes 2..4 entirely.
    let mut perturbed = st.clone();
    for j in 2..5 {
        perturbed.x[j] *= -3.0;
        perturbed.x_prev[j] *= 0.5;
        perturbed.s[j] += DVector::from_element(5, 7.0);
        perturbed.theta[j] *= 2.0;
        perturbed.theta_prev[j] *= 4.0;
    }
    dpda_step(&inst, &mut perturbed).unwrap();
    assert_eq!(perturbed.x[0], reference.x[0]);
    assert_eq!(perturbed.theta[0], reference.theta[0]);
    assert_eq!(perturbed.s[0], reference.s[0]);
    assert_ne!(perturbed.x[1], reference.x[1]);
}

#[test]
fn objective_gap_shrinks_late_in_the_run() {
    let inst = with_reference(gen_classo_instance(6, 8, 4, 0.1, 8, ClassoVariant::II).unwrap());
    let g = Graph::cycle(4).unwrap();
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let tr = run_dpda(&inst, &g, 4000, &p, None, &run_opts(250)).unwrap();
    let gaps: Vec<f64> = tr.records.iter().map(|r| r.theorem_gap.unwrap()).collect();
    let tail = &gaps[gaps.len() / 2..];
    assert!(tail.windows(2).all(|w| w[1] <= w[0]), "{tail:?}");
    assert!(tr.condition_failures.is_empty());
}

#[test]
fn non_finite_iterates_abort() {
    let inst = gen_classo_instance(5, 6, 3, 0.1, 4, ClassoVariant::I).unwrap();
    let g = Graph::complete(3);
    let p = AlgoParams::static_defaults(&inst, 2, BPolicy::AffineZero);
    let mut st = dpda_init(&inst, &g, &p, None).unwrap();
    st.x[1][0] = f64::NAN;
    assert!(matches!(dpda_step(&inst, &mut st), Err(Error::Numerical { .. })));
}
