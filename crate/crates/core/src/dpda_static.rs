//! Distributed primal-dual method over a static undirected network.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Blocks};
use crate::error::{invalid, Error, Result};
use crate::graph::{lambda2, Graph};
use crate::metrics::{GapKind, Recorder, RunTrace};
use crate::mixing::Messenger;
use crate::problems::{choose_alpha_mu, Instance, Topology};
use crate::schedule::{check_static_conditions, init_static, resolve_b, BPolicy, BTopology, StepParams, StepState};

/// Step parameters chosen by the caller; `(alpha, mu)` and `B` are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    pub gamma0: f64,
    pub delta: f64,
    pub b_policy: BPolicy,
    pub safety_factor: f64,
}

/// Default margin above the `alpha` threshold (`4 + 0.1` over `4`).
pub const DEFAULT_SAFETY: f64 = 1.025;

impl AlgoParams {
    /// `delta = max(L_max(f), 1)`, `gamma0 = 1/(2 d_max + L_max(f))`.
    pub fn static_defaults(inst: &Instance, d_max: usize, b_policy: BPolicy) -> Self {
        let l = inst.l_max_f;
        AlgoParams {
            gamma0: 1.0 / (2.0 * d_max as f64 + l),
            delta: l.max(1.0),
            b_policy,
            safety_factor: DEFAULT_SAFETY,
        }
    }

    /// `delta = 1`, `gamma0 = 1/2`.
    pub fn dynamic_defaults(b_policy: BPolicy) -> Self {
        AlgoParams { gamma0: 0.5, delta: 1.0, b_policy, safety_factor: DEFAULT_SAFETY }
    }

    /// `gamma0 = 1/4`, `delta = C_min`, used for the ellipsoid experiments.
    pub fn ellipsoid_defaults(inst: &Instance, b_policy: BPolicy) -> Self {
        AlgoParams { gamma0: 0.25, delta: inst.c_min, b_policy, safety_factor: DEFAULT_SAFETY }
    }
}

/// Options for a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub stride: usize,
    pub check_conditions: bool,
    pub keep_snapshots: bool,
    /// Stop once `max pairwise disagreement + infeasibility` drops below this.
    pub tolerance: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { stride: 1, check_conditions: false, keep_snapshots: false, tolerance: None }
    }
}

pub(crate) fn check_start(inst: &Instance, x0: &[DVector<f64>]) -> Result<()> {
    if x0.len() != inst.node_count() {
        return Err(Error::DimensionMismatch { expected: inst.node_count(), got: x0.len() });
    }
    for (i, (a, b)) in inst.agents.iter().zip(x0).enumerate() {
        if b.len() != a.dim {
            return Err(Error::DimensionMismatch { expected: a.dim, got: b.len() });
        }
        if !a.rho.in_domain(b) {
            return Err(invalid(format!("starting point of agent {i} lies outside dom rho")));
        }
    }
    Ok(())
}

/// Iterates of the static method at iteration `k`.
#[derive(Debug, Clone)]
pub struct DpdaState {
    pub x: Blocks,
    pub x_prev: Blocks,
    pub theta: Blocks,
    pub theta_prev: Blocks,
    /// `s_i^k = sum_{t<k} gamma^t x_i^{t+1}`; the edge duals are `M s^k`.
    pub s: Blocks,
    pub steps: StepState,
    pub alpha: f64,
    pub lambda2: f64,
    pub b: f64,
    graph: Graph,
    messenger: Messenger,
}

/// `x^{-1} = x^0`, `theta^{-1} = theta^0 = 0`, `s^0 = 0`.
pub fn dpda_init(
    inst: &Instance,
    graph: &Graph,
    params: &AlgoParams,
    x0: Option<&[DVector<f64>]>,
) -> Result<DpdaState> {
    if graph.is_directed() {
        return Err(Error::GraphKind { expected: "undirected" });
    }
    if graph.node_count() != inst.node_count() {
        return Err(Error::DimensionMismatch { expected: inst.node_count(), got: graph.node_count() });
    }
    if !graph.is_connected() {
        return Err(Error::Disconnected);
    }
    let x0: Blocks = match x0 {
        Some(x) => x.to_vec(),
        None => blocks::zeros(inst.node_count(), inst.dim()),
    };
    check_start(inst, &x0)?;
    let lam2 = if inst.node_count() > 1 { lambda2(&graph.laplacian()?)? } else { 0.0 };
    let (alpha, mu) = choose_alpha_mu(inst, Topology::Static { lambda2: lam2 }, params.safety_factor)?;
    let d_max = graph.max_degree();
    let b = resolve_b(inst, params.b_policy, params.gamma0, params.delta, BTopology::Static { d_max, alpha }, &x0)?;
    let steps = init_static(inst, d_max, StepParams { gamma0: params.gamma0, delta: params.delta, b, alpha, mu })?;
    let theta: Blocks = inst.agents.iter().map(|a| DVector::zeros(a.constraint_dim())).collect();
    Ok(DpdaState {
        x_prev: x0.clone(),
        s: blocks::zeros(inst.node_count(), inst.dim()),
        x: x0,
        theta_prev: theta.clone(),
        theta,
        steps,
        alpha,
        lambda2: lam2,
        b,
        graph: graph.clone(),
        messenger: Messenger::new(),
    })
}

impl DpdaState {
    /// Records every neighbour read as `(round, receiver, sender)`.
    pub fn with_access_log(mut self) -> Self {
        self.messenger = Messenger::with_log();
        self
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn messenger(&self) -> &Messenger {
        &self.messenger
    }

    pub fn k(&self) -> usize {
        self.steps.k
    }
}

/// One message per node and iteration.
struct Outgoing {
    s: DVector<f64>,
    x: DVector<f64>,
}

/// Node `i`'s update from its own state and its inbox.
fn node_update(
    inst: &Instance,
    st: &DpdaState,
    i: usize,
    inbox: &[(usize, &Outgoing)],
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let a = &inst.agents[i];
    let steps = &st.steps;
    let (x, s) = (&st.x[i], &st.s[i]);
    let mut lap_s = DVector::zeros(x.len());
    let mut lap_x = DVector::zeros(x.len());
    for (_, m) in inbox {
        lap_s += s - &m.s;
        lap_x += x - &m.x;
    }
    // (1 + eta) M'lambda^k - eta M'lambda^{k-1} with lambda^k - lambda^{k-1} = gamma^{k-1} M x^k
    // and gamma^{k-1} = eta^k gamma^k.
    let eta = steps.eta;
    let mut p = lap_s + &lap_x * (eta * eta * steps.gamma);
    if a.constraint_dim() > 0 {
        p += a.jt_mul(x, &st.theta[i]) * (1.0 + eta) - a.jt_mul(&st.x_prev[i], &st.theta_prev[i]) * eta;
    }
    let grad = a.f_grad(x) + p + lap_x * st.alpha;
    let x_new = a.rho.prox(&(x - grad * steps.tau), steps.tau)?;
    let theta_new = if a.constraint_dim() > 0 {
        a.cone.project_dual(&(&st.theta[i] + a.g_value(&x_new) * steps.kappa[i]))
    } else {
        st.theta[i].clone()
    };
    let s_new = s + &x_new * steps.gamma;
    Ok((x_new, theta_new, s_new))
}

/// One iteration: a single exchange of `(s_j, x_j)` with the neighbours,
/// then purely local updates and the schedule advance.
pub fn dpda_step(inst: &Instance, st: &mut DpdaState) -> Result<()> {
    let outgoing: Vec<Outgoing> =
        st.s.iter().zip(&st.x).map(|(s, x)| Outgoing { s: s.clone(), x: x.clone() }).collect();
    let mut messenger = std::mem::take(&mut st.messenger);
    let inboxes = messenger.round(&st.graph, &outgoing);
    let mut updates = Vec::with_capacity(inboxes.len());
    for (i, inbox) in inboxes.iter().enumerate() {
        updates.push(node_update(inst, st, i, inbox)?);
    }
    st.messenger = messenger;
    let (x, (theta, s)): (Blocks, (Blocks, Blocks)) = updates.into_iter().map(|(a, b, c)| (a, (b, c))).unzip();
    if !blocks::all_finite(&x) || !blocks::all_finite(&theta) || !blocks::all_finite(&s) {
        return Err(Error::Numerical { iteration: st.steps.k, detail: "non-finite iterate".into() });
    }
    st.x_prev = std::mem::replace(&mut st.x, x);
    st.theta_prev = std::mem::replace(&mut st.theta, theta);
    st.s = s;
    st.steps = st.steps.advance();
    Ok(())
}

/// `max_{(i,j)} ||x_i - x_j|| + max_i d_{-K_i}(g_i(x_i))`.
pub(crate) fn combined_residual(inst: &Instance, x: &[DVector<f64>]) -> f64 {
    let mut disagreement = 0.0f64;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            disagreement = disagreement.max((&x[i] - &x[j]).norm());
        }
    }
    disagreement + crate::metrics::infeasibility(x, inst)
}

/// Runs `iterations` steps and records metrics at `k = 1, 1 + stride, ...`.
pub fn run_dpda(
    inst: &Instance,
    graph: &Graph,
    iterations: usize,
    params: &AlgoParams,
    x0: Option<&[DVector<f64>]>,
    opts: &RunOptions,
) -> Result<RunTrace> {
    let mut st = dpda_init(inst, graph, params, x0)?;
    run_from(inst, &mut st, iterations, opts)
}

/// As [`run_dpda`] from an already initialised state.
pub fn run_from(inst: &Instance, st: &mut DpdaState, iterations: usize, opts: &RunOptions) -> Result<RunTrace> {
    if iterations == 0 || opts.stride == 0 {
        return Err(invalid("iterations and stride must be at least 1"));
    }
    let d_max = st.graph.max_degree();
    let graph = st.graph.clone();
    let gap = GapKind::Static { graph: &graph, alpha: st.alpha };
    let mut rec = Recorder::new(inst, gap, &st.steps, opts.stride, opts.keep_snapshots);
    rec.trace.meta.algorithm = "dpda".into();
    for _ in 0..iterations {
        let before = st.steps.clone();
        dpda_step(inst, st)?;
        if opts.check_conditions {
            rec.conditions(check_static_conditions(&before, &st.steps, inst, d_max));
        }
        let k = st.steps.k;
        rec.observe(k, st.messenger.rounds(), &st.x, &st.theta, before.gamma, &st.steps, None, None);
        if opts.tolerance.is_some_and(|tol| combined_residual(inst, &st.x) < tol) {
            break;
        }
    }
    let rounds = st.messenger.rounds();
    Ok(rec.finish(&st.x, &st.theta, rounds, rounds))
}
