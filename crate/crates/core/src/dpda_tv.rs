//! Distributed primal-dual method over time-varying (possibly directed)
//! networks, with inexact consensus projections computed by a fixed number
//! of communication rounds.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Blocks};
use crate::dpda_static::{check_start, AlgoParams, RunOptions};
use crate::error::{invalid, Error, Result};
use crate::metrics::{GapKind, Recorder, RunTrace};
use crate::mixing::{exact_average, CommNetwork, GraphSource, MixingKind};
use crate::problems::{choose_alpha_mu, Instance, Topology};
use crate::prox::project_ball;
use crate::schedule::{
    check_dynamic_conditions, init_dynamic, resolve_b, BTopology, CommSchedule, StepParams, StepState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// `R^k` from `q_k` rounds of neighbour mixing.
    Inexact,
    /// `R^k = P_C`, no counted rounds.
    Exact,
}

/// Method-specific options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvOptions {
    pub schedule: CommSchedule,
    pub mode: AveragingMode,
    /// Compute the error sequences `e1, e2, e3` every iteration.
    pub shadow: bool,
    /// Also retain the inputs they were computed from.
    pub keep_shadow_inputs: bool,
}

impl TvOptions {
    pub fn new(schedule: CommSchedule, mode: AveragingMode) -> Self {
        TvOptions { schedule, mode, shadow: false, keep_shadow_inputs: false }
    }

    pub fn with_shadow(mut self, keep_inputs: bool) -> Self {
        self.shadow = true;
        self.keep_shadow_inputs = keep_inputs;
        self
    }
}

/// What the exact recursion needs to replay iteration `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowInputs {
    pub k: usize,
    pub q: usize,
    pub tau: f64,
    pub xi: Blocks,
    pub p: Blocks,
    pub r_xi: Blocks,
    pub xi_next: Blocks,
    pub omega: Blocks,
    pub r_omega: Blocks,
}

/// Norms of the three error sequences, one entry per replayed iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorSequences {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub e3: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DpdaTvState {
    pub xi: Blocks,
    pub xi_prev: Blocks,
    pub theta: Blocks,
    pub theta_prev: Blocks,
    pub nu: Blocks,
    pub nu_prev: Blocks,
    pub steps: StepState,
    pub alpha: f64,
    pub b: f64,
    /// Rounds actually performed so far.
    pub t_k: usize,
    /// `2 sum q_k` regardless of mode.
    pub rounds_nominal: usize,
    /// `Delta`, so the ball in the consensus-dual step has radius `2 Delta`.
    pub domain_radius: f64,
    /// `sum_{t<=k} gamma^t` for the dual growth bound.
    pub gamma_sum: f64,
    pub nu_bound_violations: usize,
    pub last_errors: Option<[f64; 3]>,
    pub shadow_log: Vec<ShadowInputs>,
    options: TvOptions,
    net: CommNetwork,
}

/// `xi^{-1} = xi^0`, `theta^{-1} = theta^0 = 0`, `nu^{-1} = nu^0 = 0`.
pub fn dpda_tv_init(
    inst: &Instance,
    source: GraphSource,
    kind: MixingKind,
    params: &AlgoParams,
    xi0: Option<&[DVector<f64>]>,
    options: TvOptions,
) -> Result<DpdaTvState> {
    options.schedule.validate()?;
    if source.node_count() != inst.node_count() {
        return Err(Error::DimensionMismatch { expected: inst.node_count(), got: source.node_count() });
    }
    let net = CommNetwork::new(source, kind)?;
    let domain_radius =
        inst.delta.ok_or_else(|| invalid("the time-varying method needs every dom rho_i to be bounded"))?;
    let xi0: Blocks = match xi0 {
        Some(x) => x.to_vec(),
        None => blocks::zeros(inst.node_count(), inst.dim()),
    };
    check_start(inst, &xi0)?;
    let (alpha, mu) = choose_alpha_mu(inst, Topology::Dynamic, params.safety_factor)?;
    let b = resolve_b(inst, params.b_policy, params.gamma0, params.delta, BTopology::Dynamic { alpha }, &xi0)?;
    let steps = init_dynamic(inst, StepParams { gamma0: params.gamma0, delta: params.delta, b, alpha, mu })?;
    let theta: Blocks = inst.agents.iter().map(|a| DVector::zeros(a.constraint_dim())).collect();
    let nu = blocks::zeros(inst.node_count(), inst.dim());
    Ok(DpdaTvState {
        xi_prev: xi0.clone(),
        xi: xi0,
        theta_prev: theta.clone(),
        theta,
        nu_prev: nu.clone(),
        nu,
        steps,
        alpha,
        b,
        t_k: 0,
        rounds_nominal: 0,
        domain_radius,
        gamma_sum: 0.0,
        nu_bound_violations: 0,
        last_errors: None,
        shadow_log: Vec::new(),
        options,
        net,
    })
}

impl DpdaTvState {
    pub fn with_access_log(mut self) -> Self {
        self.net = self.net.with_access_log();
        self
    }

    pub fn network(&self) -> &CommNetwork {
        &self.net
    }

    pub fn options(&self) -> &TvOptions {
        &self.options
    }

    pub fn k(&self) -> usize {
        self.steps.k
    }

    /// `3 sqrt(N) Delta sum_{t<=k} gamma^t`, the bound on `||nu^{k+1}||`.
    pub fn nu_bound(&self) -> f64 {
        3.0 * (self.xi.len() as f64).sqrt() * self.domain_radius * self.gamma_sum
    }

    fn average(&mut self, omega: &[DVector<f64>], q: usize) -> Result<Blocks> {
        match self.options.mode {
            AveragingMode::Exact => Ok(exact_average(omega)),
            AveragingMode::Inexact => {
                self.t_k += q;
                Ok(self.net.average(omega, q)?.output)
            }
        }
    }
}

fn primal_update(
    inst: &Instance,
    i: usize,
    xi: &DVector<f64>,
    p: &DVector<f64>,
    avg: &DVector<f64>,
    alpha: f64,
    tau: f64,
) -> Result<DVector<f64>> {
    let a = &inst.agents[i];
    let grad = a.f_grad(xi) + p + (xi - avg) * alpha;
    a.rho.prox(&(xi - grad * tau), tau)
}

fn clamp_blocks(x: &[DVector<f64>], radius: f64) -> Blocks {
    x.iter().map(|b| project_ball(b, radius)).collect()
}

/// Norms of `e1, e2, e3` for one iteration's inputs.
pub fn error_norms(inst: &Instance, alpha: f64, radius: f64, s: &ShadowInputs) -> Result<[f64; 3]> {
    let ball = 2.0 * radius;
    let e1 = blocks::dist(&clamp_blocks(&exact_average(&s.omega), ball), &clamp_blocks(&s.r_omega, ball));
    let pc_xi = exact_average(&s.xi);
    let e2 = blocks::dist(&pc_xi, &s.r_xi);
    let mut e3 = 0.0;
    for (i, c) in pc_xi.iter().enumerate() {
        let exact = primal_update(inst, i, &s.xi[i], &s.p[i], c, alpha, s.tau)?;
        e3 += (&s.xi_next[i] - exact).norm_squared();
    }
    Ok([e1, e2, e3.sqrt()])
}

/// Replays the exact primal and consensus-dual maps on retained inputs.
pub fn measure_error_sequences(inst: &Instance, state: &DpdaTvState) -> Result<ErrorSequences> {
    if state.shadow_log.is_empty() {
        return Err(Error::MissingShadow);
    }
    let mut out = ErrorSequences::default();
    for s in &state.shadow_log {
        let [e1, e2, e3] = error_norms(inst, state.alpha, state.domain_radius, s)?;
        out.e1.push(e1);
        out.e2.push(e2);
        out.e3.push(e3);
    }
    Ok(out)
}

/// One iteration: `q_k` rounds for `R(xi^k)`, local primal and cone-dual
/// steps, `q_k` rounds for `R(omega^k)`, the consensus-dual step, advance.
pub fn dpda_tv_step(inst: &Instance, st: &mut DpdaTvState) -> Result<()> {
    let k = st.steps.k;
    let q = st.options.schedule.q_of(k);
    let (eta, tau, gamma) = (st.steps.eta, st.steps.tau, st.steps.gamma);
    let nodes = st.xi.len();

    let mut p = Vec::with_capacity(nodes);
    for (i, a) in inst.agents.iter().enumerate() {
        let mut pi = &st.nu[i] * (1.0 + eta) - &st.nu_prev[i] * eta;
        if a.constraint_dim() > 0 {
            pi += a.jt_mul(&st.xi[i], &st.theta[i]) * (1.0 + eta) - a.jt_mul(&st.xi_prev[i], &st.theta_prev[i]) * eta;
        }
        p.push(pi);
    }

    let xi_snapshot = st.xi.clone();
    let r_xi = st.average(&xi_snapshot, q)?;
    let mut xi_next = Vec::with_capacity(nodes);
    let mut theta_next = Vec::with_capacity(nodes);
    for (i, a) in inst.agents.iter().enumerate() {
        let x = primal_update(inst, i, &st.xi[i], &p[i], &r_xi[i], st.alpha, tau)?;
        theta_next.push(if a.constraint_dim() > 0 {
            a.cone.project_dual(&(&st.theta[i] + a.g_value(&x) * st.steps.kappa[i]))
        } else {
            st.theta[i].clone()
        });
        xi_next.push(x);
    }

    let omega: Blocks = st.nu.iter().zip(&xi_next).map(|(n, x)| n / gamma + x).collect();
    let r_omega = st.average(&omega, q)?;
    let ball = 2.0 * st.domain_radius;
    let nu_next: Blocks = omega.iter().zip(&r_omega).map(|(w, r)| (w - project_ball(r, ball)) * gamma).collect();
    st.rounds_nominal += 2 * q;

    if !blocks::all_finite(&xi_next) || !blocks::all_finite(&theta_next) || !blocks::all_finite(&nu_next) {
        return Err(Error::Numerical { iteration: k, detail: "non-finite iterate".into() });
    }

    st.gamma_sum += gamma;
    if blocks::norm(&nu_next) > st.nu_bound() * (1.0 + 1e-12) + 1e-12 {
        st.nu_bound_violations += 1;
    }

    if st.options.shadow {
        let s = ShadowInputs { k, q, tau, xi: xi_snapshot, p, r_xi, xi_next: xi_next.clone(), omega, r_omega };
        st.last_errors = Some(error_norms(inst, st.alpha, st.domain_radius, &s)?);
        if st.options.keep_shadow_inputs {
            st.shadow_log.push(s);
        }
    }

    st.xi_prev = std::mem::replace(&mut st.xi, xi_next);
    st.theta_prev = std::mem::replace(&mut st.theta, theta_next);
    st.nu_prev = std::mem::replace(&mut st.nu, nu_next);
    st.steps = st.steps.advance();
    Ok(())
}

/// Runs `iterations` steps from a fresh state.
#[allow(clippy::too_many_arguments)]
pub fn run_dpda_tv(
    inst: &Instance,
    source: GraphSource,
    kind: MixingKind,
    iterations: usize,
    params: &AlgoParams,
    xi0: Option<&[DVector<f64>]>,
    tv: TvOptions,
    opts: &RunOptions,
) -> Result<RunTrace> {
    let mut st = dpda_tv_init(inst, source, kind, params, xi0, tv)?;
    run_tv_from(inst, &mut st, iterations, opts)
}

/// As [`run_dpda_tv`] on an existing state, which is left at the last iterate.
pub fn run_tv_from(inst: &Instance, st: &mut DpdaTvState, iterations: usize, opts: &RunOptions) -> Result<RunTrace> {
    if iterations == 0 || opts.stride == 0 {
        return Err(invalid("iterations and stride must be at least 1"));
    }
    let mut rec = Recorder::new(inst, GapKind::Dynamic, &st.steps, opts.stride, opts.keep_snapshots);
    rec.trace.meta.algorithm = "dpda_tv".into();
    rec.trace.meta.exact_averaging = st.options.mode == AveragingMode::Exact;
    for _ in 0..iterations {
        let before = st.steps.clone();
        dpda_tv_step(inst, st)?;
        if opts.check_conditions {
            rec.conditions(check_dynamic_conditions(&before, &st.steps, inst));
        }
        let nu = Some(blocks::norm(&st.nu));
        rec.observe(st.steps.k, st.t_k, &st.xi, &st.theta, before.gamma, &st.steps, nu, st.last_errors);
        if opts.tolerance.is_some_and(|tol| crate::dpda_static::combined_residual(inst, &st.xi) < tol) {
            break;
        }
    }
    rec.trace.nu_bound_violations = st.nu_bound_violations;
    Ok(rec.finish(&st.xi, &st.theta, st.rounds_nominal, st.t_k))
}
