//! Step-size state machines, the dual bound `B`, communication budgets `q_k`
//! and executable step-condition checkers.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::oracle::OracleSolution;
use crate::problems::Instance;

/// Scalar parameters that fix a step-size sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub gamma0: f64,
    pub delta: f64,
    pub b: f64,
    pub alpha: f64,
    pub mu: f64,
}

impl StepParams {
    fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0) || !(self.delta > 0.0) {
            return Err(invalid("gamma0 and delta must be positive"));
        }
        if !(self.b >= 0.0) || !(self.alpha >= 0.0) || !(self.mu >= 0.0) {
            return Err(invalid("B, alpha and mu must be nonnegative"));
        }
        Ok(())
    }
}

/// The coupled sequences `(tilde_tau^k, tau^k, gamma^k, eta^k, kappa_i^k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub k: usize,
    pub tilde_tau: f64,
    pub tau: f64,
    pub gamma: f64,
    pub eta: f64,
    pub kappa: Vec<f64>,
    pub params: StepParams,
    /// `C_{g_i}^2` per agent (zero for unconstrained agents).
    c_sq: Vec<f64>,
}

impl StepState {
    fn start(inst: &Instance, params: StepParams, tilde_tau: f64) -> Self {
        let c_sq = inst.agents.iter().map(|a| if a.constraint_dim() > 0 { a.c_g * a.c_g } else { 0.0 }).collect();
        let mut s =
            StepState { k: 0, tilde_tau, tau: 0.0, gamma: params.gamma0, eta: 0.0, kappa: Vec::new(), params, c_sq };
        s.refresh();
        s
    }

    fn refresh(&mut self) {
        self.tau = 1.0 / (1.0 / self.tilde_tau + self.params.mu);
        let gd = self.gamma * self.params.delta;
        self.kappa = self.c_sq.iter().map(|&c2| if c2 > 0.0 { gd / c2 } else { 0.0 }).collect();
    }

    /// One application of the update rule:
    /// `gamma+ = gamma sqrt(1 + mu tilde_tau)`, `eta+ = gamma/gamma+`,
    /// `tilde_tau+ = eta+ tilde_tau`.
    pub fn advance(&self) -> StepState {
        let mut next = self.clone();
        next.gamma = self.gamma * (1.0 + self.params.mu * self.tilde_tau).sqrt();
        next.eta = self.gamma / next.gamma;
        next.tilde_tau = self.tilde_tau * next.eta;
        next.k += 1;
        next.refresh();
        next
    }

    /// Replaces `tilde_tau` (for experiments with smaller-than-default steps).
    pub fn with_tilde_tau(mut self, tilde_tau: f64) -> Self {
        self.tilde_tau = tilde_tau;
        self.refresh();
        self
    }

    pub fn mu(&self) -> f64 {
        self.params.mu
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }

    pub fn delta(&self) -> f64 {
        self.params.delta
    }

    pub fn b(&self) -> f64 {
        self.params.b
    }
}

/// `(L_max(f) + 2[alpha d_max + 2 gamma0 (2 d_max + delta) + B L_max(G)])^{-1}`.
pub fn tau_bar_static(inst: &Instance, d_max: usize, p: &StepParams) -> f64 {
    let d = d_max as f64;
    1.0 / (inst.l_max_f + 2.0 * (p.alpha * d + 2.0 * p.gamma0 * (2.0 * d + p.delta) + p.b * inst.l_max_g))
}

/// `(L_max(f) + alpha + 2 gamma0 (1 + delta) + 2 B L_max(G))^{-1}`.
pub fn tau_bar_dynamic(inst: &Instance, p: &StepParams) -> f64 {
    1.0 / (inst.l_max_f + p.alpha + 2.0 * p.gamma0 * (1.0 + p.delta) + 2.0 * p.b * inst.l_max_g)
}

pub fn init_static(inst: &Instance, d_max: usize, params: StepParams) -> Result<StepState> {
    params.validate()?;
    Ok(StepState::start(inst, params, tau_bar_static(inst, d_max, &params)))
}

pub fn init_dynamic(inst: &Instance, params: StepParams) -> Result<StepState> {
    params.validate()?;
    Ok(StepState::start(inst, params, tau_bar_dynamic(inst, &params)))
}

/// One inequality of a step-condition report; `slack = lhs - rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub name: String,
    pub agent: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub k: usize,
    pub entries: Vec<ConditionEntry>,
}

/// Absolute slack tolerance, applied relative to the magnitude of the sides
/// once they exceed one.
pub const CONDITION_TOL: f64 = 1e-10;

impl ConditionReport {
    fn push(&mut self, name: &str, agent: Option<usize>, lhs: f64, rhs: f64) {
        let slack = lhs - rhs;
        let scale = 1f64.max(lhs.abs()).max(rhs.abs());
        let pass = slack.is_finite() && slack >= -CONDITION_TOL * scale;
        self.entries.push(ConditionEntry { name: name.into(), agent, lhs, rhs, slack, pass });
    }

    fn push_eq(&mut self, name: &str, lhs: f64, rhs: f64) {
        let scale = 1f64.max(lhs.abs()).max(rhs.abs());
        let slack = -(lhs - rhs).abs();
        let pass = slack >= -CONDITION_TOL * scale;
        self.entries.push(ConditionEntry { name: name.into(), agent: None, lhs, rhs, slack, pass });
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConditionEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }
}

/// Sufficient step conditions for the static method, with the free
/// sequence `alpha^{k+1} = 2 gamma^k (delta + 2 d_max)` and `c = 2`.
pub fn check_static_conditions(s: &StepState, next: &StepState, inst: &Instance, d_max: usize) -> ConditionReport {
    let d = d_max as f64;
    let p = &s.params;
    let mut r = ConditionReport { k: s.k, entries: Vec::new() };
    let a_next = 2.0 * s.gamma * (p.delta + 2.0 * d);
    // alpha^k eta^k with alpha^k = 2 gamma^{k-1} (delta + 2 d) and gamma^{k-1} = eta^k gamma^k.
    let a_eta = 2.0 * s.eta * s.eta * s.gamma * (p.delta + 2.0 * d);
    r.push("tau_growth", None, 1.0 / s.tilde_tau + p.mu, 1.0 / (next.tilde_tau * next.eta));
    r.push("primal", None, 1.0 / s.tilde_tau, inst.l_max_f + 2.0 * (p.alpha * d + a_eta + p.b * inst.l_max_g));
    r.push(
        "primal_sufficient",
        None,
        1.0 / s.tilde_tau,
        inst.l_max_f + 2.0 * (p.alpha * d + 2.0 * s.gamma * (p.delta + 2.0 * d) + p.b * inst.l_max_g),
    );
    r.push_eq("eta_ratio", next.eta, s.gamma / next.gamma);
    for (i, (a, &kappa)) in inst.agents.iter().zip(&s.kappa).enumerate() {
        if a.constraint_dim() == 0 {
            continue;
        }
        r.push("kappa_dual", Some(i), 1.0 / kappa, 2.0 * a.c_g * a.c_g / a_next);
        r.push("kappa_growth", Some(i), 1.0 / kappa, 1.0 / (next.kappa[i] * next.eta));
    }
    r.push("gamma_dual", None, 1.0 / s.gamma, 4.0 * d / a_next);
    r.push("gamma_growth", None, 1.0 / s.gamma, 1.0 / (next.gamma * next.eta));
    r
}

/// The time-varying step conditions, per agent.
pub fn check_dynamic_conditions(s: &StepState, next: &StepState, inst: &Instance) -> ConditionReport {
    let p = &s.params;
    let mut r = ConditionReport { k: s.k, entries: Vec::new() };
    r.push("cond1", None, s.gamma / s.tau, next.gamma * (1.0 / next.tau - p.mu));
    for (i, (a, &kappa)) in inst.agents.iter().zip(&s.kappa).enumerate() {
        if a.constraint_dim() > 0 {
            r.push("cond2", Some(i), s.gamma / kappa, next.gamma / next.kappa[i]);
        }
    }
    // The consensus-dual step is gamma itself, so this ratio is identically one.
    r.push("cond3", None, 1.0, 1.0);
    r.push_eq("cond4", s.gamma, next.gamma * next.eta);
    let a_base = s.eta * s.eta * s.gamma * (1.0 + p.delta);
    for (i, a) in inst.agents.iter().enumerate() {
        let a_i = a_base + s.eta * p.b * a.l_g;
        r.push("cond5", Some(i), 1.0 / s.tau - (a.l_f + p.alpha), a_i + p.b * a.l_g);
        r.push("cond6", Some(i), 1.0 / s.tau - p.mu, 2.0 * a_i);
    }
    r.push(
        "sufficient",
        None,
        1.0 / s.tilde_tau,
        inst.l_max_f + p.alpha + 2.0 * (s.gamma * (1.0 + p.delta) + p.b * inst.l_max_g),
    );
    r
}

/// Communication budget `q_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CommSchedule {
    /// `(5 + c) log_{1/varsigma}(k + 1)`.
    Logarithmic {
        c: f64,
        varsigma: f64,
    },
    /// `(k + 1)^{1/p}`.
    Polynomial {
        p: f64,
    },
    Constant {
        q: usize,
    },
}

impl CommSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CommSchedule::Logarithmic { c, varsigma } => {
                if !(varsigma > 0.0 && varsigma < 1.0) {
                    return Err(invalid(format!("varsigma {varsigma} outside (0, 1)")));
                }
                if !(c >= 0.0) {
                    return Err(invalid("c must be nonnegative"));
                }
            }
            CommSchedule::Polynomial { p } => {
                if !(p >= 1.0) {
                    return Err(invalid(format!("p = {p} must be at least 1")));
                }
            }
            CommSchedule::Constant { q } => {
                if q == 0 {
                    return Err(invalid("constant schedule needs q >= 1"));
                }
            }
        }
        Ok(())
    }

    /// The schedule before rounding.
    pub fn raw(&self, k: usize) -> f64 {
        let x = (k + 1) as f64;
        match *self {
            CommSchedule::Logarithmic { c, varsigma } => (5.0 + c) * x.ln() / (1.0 / varsigma).ln(),
            CommSchedule::Polynomial { p } => x.powf(1.0 / p),
            CommSchedule::Constant { q } => q as f64,
        }
    }

    /// Rounded budget, never below one round.
    pub fn q_of(&self, k: usize) -> usize {
        ((self.raw(k) - 1e-9).ceil().max(1.0)) as usize
    }

    /// `sum_{k=1}^{K} beta^{q_{k-1}} k^power`.
    pub fn summability_partial(&self, beta: f64, upto: usize, power: i32) -> f64 {
        (1..=upto).map(|k| beta.powi(self.q_of(k - 1) as i32) * (k as f64).powi(power)).sum()
    }

    /// Relative change of the partial sums between `k1` and `k2`.
    pub fn summability_change(&self, beta: f64, k1: usize, k2: usize, power: i32) -> f64 {
        let s1 = self.summability_partial(beta, k1, power);
        let s2 = self.summability_partial(beta, k2, power);
        (s2 - s1).abs() / s1
    }
}

/// Inputs to the dual bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BEstimates {
    /// `||theta*||`.
    pub theta_star_norm: f64,
    /// `||theta*||_C`, the norm weighted by `C_{g_i}`.
    pub theta_star_weighted_norm: f64,
    /// `||x* - x^0||` over the stacked iterate.
    pub x_gap: f64,
}

impl BEstimates {
    /// Fallback guess when no oracle solution is at hand.
    pub fn heuristic(inst: &Instance) -> BEstimates {
        let delta = inst.delta.unwrap_or(1.0);
        BEstimates {
            theta_star_norm: 10.0,
            theta_star_weighted_norm: 10.0 * inst.c_max.max(1.0),
            x_gap: 2.0 * (inst.node_count() as f64).sqrt() * delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BTopology {
    Static { d_max: usize, alpha: f64 },
    Dynamic { alpha: f64 },
}

/// Smallest `B >= t + sqrt(a B + A0)` inflated by 10%, where
/// `a = 2 gamma0 delta L_max(G) gap^2 / C_min^2`.
pub fn compute_b(inst: &Instance, gamma0: f64, delta: f64, topology: BTopology, est: &BEstimates) -> f64 {
    let c2 = if inst.c_min > 0.0 { inst.c_min * inst.c_min } else { 1.0 };
    let gap2 = est.x_gap * est.x_gap;
    let base = match topology {
        BTopology::Static { d_max, alpha } => {
            let d = d_max as f64;
            4.0 * gamma0 * (delta + 2.0 * d) + inst.l_max_f + 2.0 * alpha * d
        }
        BTopology::Dynamic { alpha } => inst.l_max_f + alpha + 2.0 * gamma0 * (1.0 + delta),
    };
    let a0 = base * gamma0 * delta * gap2 / c2 + est.theta_star_weighted_norm.powi(2) / c2;
    let a = 2.0 * gamma0 * delta * inst.l_max_g * gap2 / c2;
    let t = est.theta_star_norm;
    // (B - t)^2 = a B + A0 with B >= t: larger root of B^2 - (2t + a) B + t^2 - A0.
    let root = 0.5 * ((2.0 * t + a) + (4.0 * t * a + a * a + 4.0 * a0).sqrt());
    1.1 * root
}

/// How the algorithms obtain `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BPolicy {
    /// `B = 0`; only valid for affine constraints.
    AffineZero,
    /// From the oracle solution attached to the instance.
    OracleDerived,
    Heuristic,
    User(f64),
}

impl BEstimates {
    /// Estimates from a reference solution and the starting point `x0`.
    pub fn from_oracle(inst: &Instance, sol: &OracleSolution, x0: &[DVector<f64>]) -> BEstimates {
        BEstimates {
            theta_star_norm: sol.theta_norm(),
            theta_star_weighted_norm: sol.theta_weighted_norm(inst),
            x_gap: x0.iter().map(|b| (b - &sol.x_star).norm_squared()).sum::<f64>().sqrt(),
        }
    }
}

/// Resolves `policy` into a concrete `B`. Never picks silently: the affine
/// shortcut is refused for nonlinear constraints and the oracle policy needs
/// a reference solution on the instance.
pub fn resolve_b(
    inst: &Instance,
    policy: BPolicy,
    gamma0: f64,
    delta: f64,
    topology: BTopology,
    x0: &[DVector<f64>],
) -> Result<f64> {
    match policy {
        BPolicy::AffineZero if inst.is_affine() => Ok(0.0),
        BPolicy::AffineZero => Err(invalid("B = 0 is only valid for affine constraints")),
        BPolicy::OracleDerived => {
            let sol = inst
                .reference
                .as_ref()
                .ok_or_else(|| invalid("oracle-derived B needs a reference solution on the instance"))?;
            Ok(compute_b(inst, gamma0, delta, topology, &BEstimates::from_oracle(inst, sol, x0)))
        }
        BPolicy::Heuristic => Ok(compute_b(inst, gamma0, delta, topology, &BEstimates::heuristic(inst))),
        BPolicy::User(b) if b >= 0.0 && b.is_finite() => Ok(b),
        BPolicy::User(b) => Err(invalid(format!("user B = {b} must be finite and nonnegative"))),
    }
}
