//! Offline re-verification of a recorded run.

use dpda::metrics::{infeasibility, TraceMeta, TraceRecord};
use dpda::prox::distance_to_consensus;
use dpda::Instance;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Written next to every trace CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub tool_version: String,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
    pub meta: TraceMeta,
    pub iterations_run: usize,
    pub rounds_nominal: usize,
    pub rounds_actual: usize,
    pub n_k: f64,
    pub nu_bound_violations: usize,
    pub condition_reports: usize,
    pub condition_failures: usize,
}

/// Every recorded iterate of a stride-1 run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Iterates {
    pub x: Vec<Vec<Vec<f64>>>,
    pub final_x_bar: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Check { name, status: if pass { Status::Pass } else { Status::Fail }, detail }
    }

    fn na(name: &'static str, why: &str) -> Self {
        Check { name, status: Status::NotApplicable, detail: why.to_string() }
    }
}

const REL_TOL: f64 = 1e-9;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// `(gamma^k, tilde_tau^k)` for `k = 0..=upto`, regenerated from the rule
/// `gamma+ = gamma sqrt(1 + mu tilde_tau)`, `tilde_tau+ = tilde_tau gamma / gamma+`.
fn regenerate(meta: &TraceMeta, upto: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(upto + 1);
    let (mut g, mut t) = (meta.gamma0, meta.tilde_tau0);
    out.push((g, t));
    for _ in 0..upto {
        let next = g * (1.0 + meta.mu * t).sqrt();
        t *= g / next;
        g = next;
        out.push((g, t));
    }
    out
}

pub fn audit(records: &[TraceRecord], side: &Sidecar, inst: &Instance, iterates: Option<&Iterates>) -> Vec<Check> {
    let meta = &side.meta;
    let mut checks = Vec::new();

    let ordered = records.windows(2).all(|w| w[0].k < w[1].k && w[0].t_k <= w[1].t_k);
    checks.push(Check::new("record order", ordered && !records.is_empty(), format!("{} records", records.len())));

    let consistent = inst.node_count() == meta.node_count && inst.delta == meta.domain_radius;
    checks.push(Check::new(
        "instance match",
        consistent,
        format!("{} agents, trace says {}", inst.node_count(), meta.node_count),
    ));

    let last_k = records.last().map_or(0, |r| r.k);
    let seq = regenerate(meta, last_k);

    // Step sizes: recorded columns against the regenerated rule, the
    // conserved product, and the tau growth condition between records.
    let c0 = meta.gamma0 * meta.tilde_tau0;
    let mut bad = Vec::new();
    for r in records {
        let (g, t) = seq[r.k];
        if !close(r.gamma, g, REL_TOL) || !close(r.tilde_tau, t, REL_TOL) {
            bad.push(format!("k={} off the step rule", r.k));
        }
        if !close(r.gamma * r.tilde_tau, c0, 1e-12) {
            bad.push(format!("k={} breaks gamma*tilde_tau conservation", r.k));
        }
    }
    for w in records.windows(2).filter(|w| w[1].k == w[0].k + 1) {
        let eta = w[0].gamma / w[1].gamma;
        let lhs = 1.0 / w[0].tilde_tau + meta.mu;
        let rhs = 1.0 / (w[1].tilde_tau * eta);
        if lhs < rhs * (1.0 - REL_TOL) || eta > 1.0 + 1e-15 {
            bad.push(format!("k={} violates the tau growth condition", w[1].k));
        }
    }
    let detail = match bad.first() {
        None => format!("{} records consistent with gamma0={:e}, mu={:e}", records.len(), meta.gamma0, meta.mu),
        Some(first) => format!("{} problems, first: {first}", bad.len()),
    };
    checks.push(Check::new("step conditions", bad.is_empty(), detail));

    // ||nu^k|| <= 3 sqrt(N) Delta sum_{t<k} gamma^t.
    let with_nu: Vec<_> = records.iter().filter_map(|r| r.nu_norm.map(|v| (r.k, v))).collect();
    match (with_nu.is_empty(), meta.domain_radius) {
        (true, _) => checks.push(Check::na("nu bound", "no nu column (static run)")),
        (false, None) => checks.push(Check::new("nu bound", false, "nu recorded but no domain radius".into())),
        (false, Some(radius)) => {
            let mut prefix = vec![0.0; seq.len() + 1];
            for (t, &(g, _)) in seq.iter().enumerate() {
                prefix[t + 1] = prefix[t] + g;
            }
            let scale = 3.0 * (meta.node_count as f64).sqrt() * radius;
            let violations = with_nu.iter().filter(|&&(k, v)| v > scale * prefix[k] * (1.0 + 1e-12) + 1e-12).count();
            checks.push(Check::new(
                "nu bound",
                violations == 0,
                format!("{violations} of {} records above the bound", with_nu.len()),
            ));
        }
    }

    if meta.b > 0.0 {
        let worst = records.iter().map(|r| r.theta_norm).fold(0.0, f64::max);
        checks.push(Check::new(
            "theta bound",
            worst <= meta.b,
            format!("max ||theta|| = {worst:.4e}, B = {:.4e}", meta.b),
        ));
    } else {
        checks.push(Check::na("theta bound", "B = 0 (affine constraints), no bound to check"));
    }

    let e_values: Vec<f64> = records.iter().flat_map(|r| [r.e1, r.e2, r.e3]).flatten().collect();
    if !meta.exact_averaging {
        checks.push(Check::na("exact-mode errors", "inexact averaging"));
    } else if e_values.is_empty() {
        checks.push(Check::na("exact-mode errors", "error columns not recorded"));
    } else {
        let worst = e_values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        checks.push(Check::new("exact-mode errors", worst == 0.0, format!("max |e| = {worst:e}")));
    }

    let negative = records.iter().any(|r| {
        let vals = [
            r.rel_err_last,
            r.rel_err_ergodic,
            Some(r.infeas_last),
            Some(r.infeas_ergodic),
            Some(r.consensus_viol),
            r.subopt_ergodic,
            r.theorem_gap,
            Some(r.theta_norm),
            r.nu_norm,
        ];
        vals.iter().flatten().any(|&v| !(v >= 0.0))
    });
    checks.push(Check::new("nonnegative metrics", !negative, String::new()));

    checks.push(match iterates {
        None => Check::na("ergodic recomputation", "no iterates file (run with save_iterates = true)"),
        Some(it) => ergodic_check(records, &seq, inst, it),
    });
    checks
}

fn ergodic_check(records: &[TraceRecord], seq: &[(f64, f64)], inst: &Instance, it: &Iterates) -> Check {
    const NAME: &str = "ergodic recomputation";
    if it.x.len() != records.len() || records.iter().enumerate().any(|(i, r)| r.k != i + 1) {
        return Check::new(NAME, false, "iterates do not line up with a stride-1 trace".into());
    }
    let to_blocks = |x: &[Vec<f64>]| x.iter().map(|b| DVector::from_column_slice(b)).collect::<Vec<_>>();
    let mut num: Vec<DVector<f64>> = Vec::new();
    let mut den = 0.0;
    let mut x_bar = Vec::new();
    let mut worst = 0.0f64;
    for (r, x) in records.iter().zip(&it.x) {
        // x^k carries weight gamma^{k-1}.
        let w = seq[r.k - 1].0;
        let x = to_blocks(x);
        if num.is_empty() {
            num = x.iter().map(|b| b * 0.0).collect();
        }
        for (acc, b) in num.iter_mut().zip(&x) {
            acc.axpy(w, b, 1.0);
        }
        den += w;
        x_bar = num.iter().map(|b| b / den).collect();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        worst = worst.max(rel(distance_to_consensus(&x_bar), r.consensus_viol));
        worst = worst.max(rel(infeasibility(&x_bar, inst), r.infeas_ergodic));
    }
    let stored = to_blocks(&it.final_x_bar);
    let mine = x_bar;
    let final_gap = dpda::blocks::dist(&mine, &stored) / dpda::blocks::norm(&stored).max(1e-300);
    worst = worst.max(final_gap);
    Check::new(NAME, worst <= 1e-10, format!("largest relative deviation {worst:.2e}"))
}
