//! Error statistics, theorem gap quantities, ergodic averages, run traces
//! and log-log rate fitting.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Blocks};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::oracle::OracleSolution;
use crate::problems::Instance;
use crate::prox::distance_to_consensus;
use crate::schedule::{ConditionReport, StepState};

/// `max_i ||x_i - x*|| / ||x*||`.
pub fn relative_error(x: &[DVector<f64>], x_star: &DVector<f64>) -> Result<f64> {
    let n = x_star.norm();
    if n == 0.0 {
        return Err(invalid("relative error needs a nonzero reference"));
    }
    Ok(x.iter().map(|b| (b - x_star).norm()).fold(0.0, f64::max) / n)
}

/// `max_i d_{-K_i}(g_i(x_i))`; for orthants this is `||(g_i(x_i))_+||`.
pub fn infeasibility(x: &[DVector<f64>], inst: &Instance) -> f64 {
    inst.agents.iter().zip(x).map(|(a, b)| a.infeasibility(b)).fold(0.0, f64::max)
}

/// `||M x|| = sqrt(sum_{(i,j) in E} ||x_i - x_j||^2)`.
pub fn edge_disagreement(x: &[DVector<f64>], graph: &Graph) -> f64 {
    graph.edges().iter().map(|&(i, j)| (&x[i] - &x[j]).norm_squared()).sum::<f64>().sqrt()
}

/// `sum_i phi_i(x_i) + (alpha/2) x'(Omega (x) I)x`.
pub fn static_objective(inst: &Instance, x: &[DVector<f64>], alpha: f64, graph: &Graph) -> f64 {
    let d = edge_disagreement(x, graph);
    inst.objective_split(x) + 0.5 * alpha * d * d
}

/// Optimal value `sum_i phi_i(x*)`.
pub fn optimal_value(inst: &Instance, sol: &OracleSolution) -> f64 {
    inst.objective(&sol.x_star)
}

fn dual_weighted_infeasibility(inst: &Instance, x: &[DVector<f64>], sol: &OracleSolution) -> f64 {
    inst.agents.iter().zip(x).zip(&sol.theta_star).map(|((a, b), t)| t.norm() * a.infeasibility(b)).sum()
}

/// Suboptimality plus the static theorem gap
/// `max{|Phi(x) - phi*|, ||M x|| + sum_i ||theta_i*|| d_{-K_i}(g_i(x_i))}`.
pub fn theorem_gap_static(
    inst: &Instance,
    graph: &Graph,
    alpha: f64,
    x: &[DVector<f64>],
    sol: &OracleSolution,
) -> (f64, f64) {
    let sub = (static_objective(inst, x, alpha, graph) - optimal_value(inst, sol)).abs();
    let feas = edge_disagreement(x, graph) + dual_weighted_infeasibility(inst, x, sol);
    (sub, sub.max(feas))
}

/// Time-varying analogue with `d_C(x)` in place of `||M x||`.
pub fn theorem_gap_dynamic(inst: &Instance, x: &[DVector<f64>], sol: &OracleSolution) -> (f64, f64) {
    let sub = (inst.objective_split(x) - optimal_value(inst, sol)).abs();
    let feas = distance_to_consensus(x) + dual_weighted_infeasibility(inst, x, sol);
    (sub, sub.max(feas))
}

/// Running `sum_k w_k x^k / sum_k w_k` with weights `gamma^{k-1}`.
#[derive(Debug, Clone)]
pub struct ErgodicAverage {
    gamma0: f64,
    weight_sum: f64,
    avg: Option<Blocks>,
}

impl ErgodicAverage {
    pub fn new(gamma0: f64) -> Self {
        ErgodicAverage { gamma0, weight_sum: 0.0, avg: None }
    }

    pub fn push(&mut self, x: &[DVector<f64>], weight: f64) {
        self.weight_sum += weight;
        let r = weight / self.weight_sum;
        match &mut self.avg {
            None => self.avg = Some(x.to_vec()),
            Some(avg) => {
                for (a, b) in avg.iter_mut().zip(x) {
                    *a += (b - &*a) * r;
                }
            }
        }
    }

    pub fn value(&self) -> Option<&Blocks> {
        self.avg.as_ref()
    }

    /// `N_K = sum_{k=1}^K gamma^{k-1} / gamma^0`.
    pub fn n_k(&self) -> f64 {
        self.weight_sum / self.gamma0
    }
}

/// Ergodic average recomputed from scratch: `sum w_k x^k / sum w_k`.
pub fn ergodic_from_snapshots(xs: &[Blocks], weights: &[f64]) -> Blocks {
    let total: f64 = weights.iter().sum();
    let mut acc = blocks::zeros(xs[0].len(), xs[0][0].len());
    for (x, &w) in xs.iter().zip(weights) {
        for (a, b) in acc.iter_mut().zip(x) {
            a.axpy(w / total, b, 1.0);
        }
    }
    acc
}

/// Iterate snapshot kept alongside a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub x: Blocks,
    pub x_bar: Blocks,
    pub theta: Blocks,
}

/// One row of a run trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub t_k: usize,
    pub rel_err_last: Option<f64>,
    pub rel_err_ergodic: Option<f64>,
    pub infeas_last: f64,
    pub infeas_ergodic: f64,
    pub consensus_viol: f64,
    pub subopt_ergodic: Option<f64>,
    pub theorem_gap: Option<f64>,
    pub gamma: f64,
    pub tilde_tau: f64,
    pub theta_norm: f64,
    pub nu_norm: Option<f64>,
    pub e1: Option<f64>,
    pub e2: Option<f64>,
    pub e3: Option<f64>,
    /// `||x^k - x*||^2 gamma^k / tilde_tau^k`, bounded by the theory.
    pub distance_monitor: Option<f64>,
    pub snapshot: Option<Snapshot>,
}

pub const CSV_HEADER: [&str; 16] = [
    "k",
    "t_k",
    "rel_err_last",
    "rel_err_ergodic",
    "infeas_last",
    "infeas_ergodic",
    "consensus_viol",
    "subopt_ergodic",
    "theorem_gap",
    "gamma",
    "tilde_tau",
    "theta_norm",
    "nu_norm",
    "e1",
    "e2",
    "e3",
];

/// Named numeric columns of a record, for rate fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    RelErrLast,
    RelErrErgodic,
    InfeasLast,
    InfeasErgodic,
    ConsensusViol,
    SuboptErgodic,
    TheoremGap,
}

impl TraceRecord {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::RelErrLast => self.rel_err_last,
            Metric::RelErrErgodic => self.rel_err_ergodic,
            Metric::InfeasLast => Some(self.infeas_last),
            Metric::InfeasErgodic => Some(self.infeas_ergodic),
            Metric::ConsensusViol => Some(self.consensus_viol),
            Metric::SuboptErgodic => self.subopt_ergodic,
            Metric::TheoremGap => self.theorem_gap,
        }
    }
}

/// Run description echoed into trace sidecars.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub algorithm: String,
    pub instance_id: String,
    pub seed: u64,
    pub gamma0: f64,
    pub tilde_tau0: f64,
    pub mu: f64,
    pub alpha: f64,
    pub delta: f64,
    pub b: f64,
    pub exact_averaging: bool,
    pub domain_radius: Option<f64>,
    pub node_count: usize,
    pub config: String,
}

/// Everything a run produces.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
    pub condition_reports: usize,
    pub condition_failures: Vec<ConditionReport>,
    pub nu_bound_violations: usize,
    pub final_x: Blocks,
    pub final_x_bar: Blocks,
    pub final_theta: Blocks,
    pub rounds_nominal: usize,
    pub rounds_actual: usize,
    /// `N_K = sum_k gamma^{k-1} / gamma^0` over the run.
    pub n_k: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

impl RunTrace {
    /// CSV with the fixed column order; missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = CSV_HEADER.join(",");
        s.push('\n');
        for r in &self.records {
            let f = |x: f64| format!("{x:.16e}");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.k,
                r.t_k,
                fmt_opt(r.rel_err_last),
                fmt_opt(r.rel_err_ergodic),
                f(r.infeas_last),
                f(r.infeas_ergodic),
                f(r.consensus_viol),
                fmt_opt(r.subopt_ergodic),
                fmt_opt(r.theorem_gap),
                f(r.gamma),
                f(r.tilde_tau),
                f(r.theta_norm),
                fmt_opt(r.nu_norm),
                fmt_opt(r.e1),
                fmt_opt(r.e2),
                fmt_opt(r.e3),
            );
        }
        s
    }

    /// Parses records back from [`to_csv`](Self::to_csv) output.
    pub fn records_from_csv(text: &str) -> Result<Vec<TraceRecord>> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty trace".into()))?;
        if header.split(',').collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::Format(format!("unexpected trace header `{header}`")));
        }
        let mut out = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != CSV_HEADER.len() {
                return Err(Error::Format(format!("row {} has {} fields", ln + 2, cells.len())));
            }
            let opt = |c: &str| -> Result<Option<f64>> {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse().map(Some).map_err(|e| Error::Format(format!("`{c}`: {e}")))
                }
            };
            let req = |c: &str| -> Result<f64> {
                opt(c)?.ok_or_else(|| Error::Format(format!("row {} missing a required value", ln + 2)))
            };
            let int = |c: &str| -> Result<usize> { c.parse().map_err(|e| Error::Format(format!("`{c}`: {e}"))) };
            out.push(TraceRecord {
                k: int(cells[0])?,
                t_k: int(cells[1])?,
                rel_err_last: opt(cells[2])?,
                rel_err_ergodic: opt(cells[3])?,
                infeas_last: req(cells[4])?,
                infeas_ergodic: req(cells[5])?,
                consensus_viol: req(cells[6])?,
                subopt_ergodic: opt(cells[7])?,
                theorem_gap: opt(cells[8])?,
                gamma: req(cells[9])?,
                tilde_tau: req(cells[10])?,
                theta_norm: req(cells[11])?,
                nu_norm: opt(cells[12])?,
                e1: opt(cells[13])?,
                e2: opt(cells[14])?,
                e3: opt(cells[15])?,
                distance_monitor: None,
                snapshot: None,
            });
        }
        Ok(out)
    }

    /// Fitted log-log slope of `metric` over records with `k` in `range`.
    pub fn rate(&self, metric: Metric, range: (usize, usize)) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .records
            .iter()
            .filter(|r| r.k >= range.0 && r.k <= range.1)
            .map(|r| (r.k as f64, r.metric(metric).unwrap_or(f64::NAN)))
            .collect();
        rate_fit(&pts)
    }
}

/// Least-squares slope of `log(metric)` against `log(k)`.
pub fn rate_fit(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 10 {
        return Err(invalid(format!("rate fit needs at least 10 points, got {}", points.len())));
    }
    if let Some(bad) = points.iter().find(|p| !(p.1 > 0.0) || !(p.0 > 0.0)) {
        return Err(invalid(format!("nonpositive value {bad:?} in rate fit")));
    }
    let m = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.0.ln(), p.1.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Which theorem quantity a run reports.
#[derive(Debug, Clone, Copy)]
pub(crate) enum GapKind<'a> {
    Static { graph: &'a Graph, alpha: f64 },
    Dynamic,
}

/// Incremental trace construction shared by both algorithms.
pub(crate) struct Recorder<'a> {
    inst: &'a Instance,
    gap: GapKind<'a>,
    ergodic: ErgodicAverage,
    stride: usize,
    keep_snapshots: bool,
    pub trace: RunTrace,
}

const MAX_KEPT_FAILURES: usize = 100;

impl<'a> Recorder<'a> {
    pub fn new(inst: &'a Instance, gap: GapKind<'a>, steps: &StepState, stride: usize, keep_snapshots: bool) -> Self {
        let p = &steps.params;
        let meta = TraceMeta {
            instance_id: inst
                .provenance
                .as_ref()
                .map(|pr| format!("{}-{}", pr.family, pr.seed))
                .unwrap_or_else(|| "custom".into()),
            seed: inst.provenance.as_ref().map_or(0, |pr| pr.seed),
            gamma0: steps.gamma,
            tilde_tau0: steps.tilde_tau,
            mu: p.mu,
            alpha: p.alpha,
            delta: p.delta,
            b: p.b,
            domain_radius: inst.delta,
            node_count: inst.node_count(),
            ..TraceMeta::default()
        };
        let trace = RunTrace { meta, ..RunTrace::default() };
        Recorder { inst, gap, ergodic: ErgodicAverage::new(steps.gamma), stride, keep_snapshots, trace }
    }

    pub fn conditions(&mut self, report: ConditionReport) {
        self.trace.condition_reports += 1;
        if !report.all_pass() && self.trace.condition_failures.len() < MAX_KEPT_FAILURES {
            self.trace.condition_failures.push(report);
        }
    }

    /// Folds `x^k` into the ergodic average with weight `gamma^{k-1}` and
    /// emits a record when `k` is on the stride.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        k: usize,
        t_k: usize,
        x: &[DVector<f64>],
        theta: &[DVector<f64>],
        weight: f64,
        steps: &StepState,
        nu_norm: Option<f64>,
        errors: Option<[f64; 3]>,
    ) {
        self.ergodic.push(x, weight);
        if !(k - 1).is_multiple_of(self.stride) {
            return;
        }
        let inst = self.inst;
        let x_bar = self.ergodic.value().expect("just pushed");
        let sol = inst.reference.as_ref();
        let usable = sol.filter(|s| s.x_star.norm() > 0.0);
        let (subopt, gap) = match (sol, self.gap) {
            (Some(s), GapKind::Static { graph, alpha }) => {
                let (a, b) = theorem_gap_static(inst, graph, alpha, x_bar, s);
                (Some(a), Some(b))
            }
            (Some(s), GapKind::Dynamic) => {
                let (a, b) = theorem_gap_dynamic(inst, x_bar, s);
                (Some(a), Some(b))
            }
            (None, _) => (None, None),
        };
        let monitor =
            sol.map(|s| x.iter().map(|b| (b - &s.x_star).norm_squared()).sum::<f64>() * steps.gamma / steps.tilde_tau);
        self.trace.records.push(TraceRecord {
            k,
            t_k,
            rel_err_last: usable.map(|s| relative_error(x, &s.x_star).expect("nonzero reference")),
            rel_err_ergodic: usable.map(|s| relative_error(x_bar, &s.x_star).expect("nonzero reference")),
            infeas_last: infeasibility(x, inst),
            infeas_ergodic: infeasibility(x_bar, inst),
            consensus_viol: distance_to_consensus(x_bar),
            subopt_ergodic: subopt,
            theorem_gap: gap,
            gamma: steps.gamma,
            tilde_tau: steps.tilde_tau,
            theta_norm: blocks::norm(theta),
            nu_norm,
            e1: errors.map(|e| e[0]),
            e2: errors.map(|e| e[1]),
            e3: errors.map(|e| e[2]),
            distance_monitor: monitor,
            snapshot: self.keep_snapshots.then(|| Snapshot {
                x: x.to_vec(),
                x_bar: x_bar.clone(),
                theta: theta.to_vec(),
            }),
        });
    }

    pub fn finish(mut self, x: &[DVector<f64>], theta: &[DVector<f64>], nominal: usize, actual: usize) -> RunTrace {
        self.trace.final_x = x.to_vec();
        self.trace.final_x_bar = self.ergodic.value().cloned().unwrap_or_default();
        self.trace.final_theta = theta.to_vec();
        self.trace.n_k = self.ergodic.n_k();
        self.trace.rounds_nominal = nominal;
        self.trace.rounds_actual = actual;
        self.trace
    }
}
