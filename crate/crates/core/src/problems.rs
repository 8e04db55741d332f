//! Agent problems, aggregate constants, regularisation moduli and the two
//! experiment generators (ellipsoid intersection and constrained LASSO).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::oracle::OracleSolution;
use crate::prox::{Cone, ProxFn};
use crate::serde_la;

/// The smooth part `f_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SmoothFn {
    Zero,
    /// `(weight / 2) ||x - center||^2`.
    WeightedProximity {
        weight: f64,
        #[serde(with = "serde_la::vec")]
        center: DVector<f64>,
    },
    /// `(1/2) ||C x - d||^2`.
    LeastSquares {
        #[serde(with = "serde_la::mat")]
        c: DMatrix<f64>,
        #[serde(with = "serde_la::vec")]
        d: DVector<f64>,
    },
}

impl SmoothFn {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            SmoothFn::Zero => 0.0,
            SmoothFn::WeightedProximity { weight, center } => 0.5 * weight * (x - center).norm_squared(),
            SmoothFn::LeastSquares { c, d } => 0.5 * (c * x - d).norm_squared(),
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SmoothFn::Zero => DVector::zeros(x.len()),
            SmoothFn::WeightedProximity { weight, center } => (x - center) * *weight,
            SmoothFn::LeastSquares { c, d } => c.tr_mul(&(c * x - d)),
        }
    }

    /// The (constant) Hessian of the quadratic.
    pub fn hessian(&self, dim: usize) -> DMatrix<f64> {
        match self {
            SmoothFn::Zero => DMatrix::zeros(dim, dim),
            SmoothFn::WeightedProximity { weight, .. } => DMatrix::identity(dim, dim) * *weight,
            SmoothFn::LeastSquares { c, .. } => c.tr_mul(c),
        }
    }

    pub fn scaled(&self, s: f64) -> SmoothFn {
        match self {
            SmoothFn::Zero => SmoothFn::Zero,
            SmoothFn::WeightedProximity { weight, center } => {
                SmoothFn::WeightedProximity { weight: weight * s, center: center.clone() }
            }
            SmoothFn::LeastSquares { c, d } => SmoothFn::LeastSquares { c: c * s.sqrt(), d: d * s.sqrt() },
        }
    }
}

/// The constraint map `g_i`, required to satisfy `g_i(x) in -K_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConstraintMap {
    None,
    /// `A x + b`.
    Affine {
        #[serde(with = "serde_la::mat")]
        a: DMatrix<f64>,
        #[serde(with = "serde_la::vec")]
        b: DVector<f64>,
    },
    /// Scalar `(1/2) x'Ax + b'x - c` with `A` symmetric PSD.
    Quadratic {
        #[serde(with = "serde_la::mat")]
        a: DMatrix<f64>,
        #[serde(with = "serde_la::vec")]
        b: DVector<f64>,
        c: f64,
    },
}

impl ConstraintMap {
    pub fn dim(&self) -> usize {
        match self {
            ConstraintMap::None => 0,
            ConstraintMap::Affine { a, .. } => a.nrows(),
            ConstraintMap::Quadratic { .. } => 1,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ConstraintMap::None => DVector::zeros(0),
            ConstraintMap::Affine { a, b } => a * x + b,
            ConstraintMap::Quadratic { a, b, c } => DVector::from_element(1, 0.5 * x.dot(&(a * x)) + b.dot(x) - c),
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            ConstraintMap::None => DMatrix::zeros(0, x.len()),
            ConstraintMap::Affine { a, .. } => a.clone(),
            ConstraintMap::Quadratic { a, b, .. } => DMatrix::from_row_slice(1, x.len(), (a * x + b).as_slice()),
        }
    }

    /// `J g(x)' theta` without forming the Jacobian.
    pub fn jacobian_t_mul(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            ConstraintMap::None => DVector::zeros(x.len()),
            ConstraintMap::Affine { a, .. } => a.tr_mul(theta),
            ConstraintMap::Quadratic { a, b, .. } => (a * x + b) * theta[0],
        }
    }
}

/// One agent's private data `(rho_i, f_i, g_i, K_i)` and its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProblem {
    pub dim: usize,
    pub rho: ProxFn,
    pub f: SmoothFn,
    pub g: ConstraintMap,
    pub cone: Cone,
    pub l_f: f64,
    pub mu: f64,
    pub l_g: f64,
    pub c_g: f64,
    pub domain_radius: Option<f64>,
}

fn sym_eigs(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    (e.min(), e.max())
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

impl AgentProblem {
    /// Builds an agent and derives `L_f, mu_i, L_g, C_g, Delta_i` from the data.
    pub fn new(dim: usize, rho: ProxFn, f: SmoothFn, g: ConstraintMap, cone: Cone) -> Result<Self> {
        if g.dim() != cone.dim() {
            return Err(Error::DimensionMismatch { expected: g.dim(), got: cone.dim() });
        }
        let (lo, hi) = sym_eigs(&f.hessian(dim));
        let l_f = hi.max(0.0);
        let mu = if lo > 1e-10 * l_f.max(1e-300) { lo } else { 0.0 };
        let radius = rho.radius();
        let (l_g, c_g) = match &g {
            ConstraintMap::None => (0.0, 0.0),
            ConstraintMap::Affine { a, .. } => (0.0, spectral_norm(a)),
            ConstraintMap::Quadratic { a, b, .. } => {
                let na = spectral_norm(a);
                let r = radius.ok_or_else(|| invalid("a quadratic constraint needs a bounded domain"))?;
                (na, r * na + b.norm())
            }
        };
        Ok(AgentProblem { dim, rho, f, g, cone, l_f, mu, l_g, c_g, domain_radius: radius })
    }

    pub fn constraint_dim(&self) -> usize {
        self.g.dim()
    }

    pub fn phi(&self, x: &DVector<f64>) -> f64 {
        self.rho.value(x) + self.f.value(x)
    }

    pub fn f_value(&self, x: &DVector<f64>) -> f64 {
        self.f.value(x)
    }

    pub fn f_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.f.grad(x)
    }

    pub fn g_value(&self, x: &DVector<f64>) -> DVector<f64> {
        self.g.value(x)
    }

    pub fn g_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.g.jacobian(x)
    }

    pub fn jt_mul(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.g.jacobian_t_mul(x, theta)
    }

    /// `d_{-K_i}(g_i(x))`.
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        if self.constraint_dim() == 0 {
            return 0.0;
        }
        self.cone.distance_to_neg(&self.g_value(x))
    }
}

/// Where an experiment instance came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub family: String,
    pub seed: u64,
    pub params: Vec<(String, f64)>,
}

/// All agents plus aggregate constants (always recomputed from the agents).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRepr", into = "InstanceRepr")]
pub struct Instance {
    pub agents: Vec<AgentProblem>,
    pub bar_mu: f64,
    pub bar_l: f64,
    pub l_max_f: f64,
    pub l_max_g: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub ubar_mu: f64,
    pub delta: Option<f64>,
    pub provenance: Option<Provenance>,
    /// Ground-truth vector the generator planted (not the optimiser).
    pub planted: Option<Vec<f64>>,
    pub reference: Option<OracleSolution>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRepr {
    agents: Vec<AgentProblem>,
    provenance: Option<Provenance>,
    planted: Option<Vec<f64>>,
    reference: Option<OracleSolution>,
}

impl TryFrom<InstanceRepr> for Instance {
    type Error = Error;
    fn try_from(r: InstanceRepr) -> Result<Self> {
        let mut inst = aggregate_constants(r.agents)?;
        inst.provenance = r.provenance;
        inst.planted = r.planted;
        inst.reference = r.reference;
        Ok(inst)
    }
}

impl From<Instance> for InstanceRepr {
    fn from(i: Instance) -> Self {
        InstanceRepr { agents: i.agents, provenance: i.provenance, planted: i.planted, reference: i.reference }
    }
}

/// Fills every aggregate field from the agent list.
pub fn aggregate_constants(agents: Vec<AgentProblem>) -> Result<Instance> {
    let first = agents.first().ok_or_else(|| invalid("instance needs at least one agent"))?;
    let n = first.dim;
    if let Some(bad) = agents.iter().find(|a| a.dim != n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad.dim });
    }
    let count = agents.len() as f64;
    let mut hess = DMatrix::zeros(n, n);
    for a in &agents {
        hess += a.f.hessian(n);
    }
    let bar_mu = sym_eigs(&hess).0.max(0.0);
    let bar_l = (agents.iter().map(|a| a.l_f * a.l_f).sum::<f64>() / count).sqrt();
    let l_max_f = agents.iter().map(|a| a.l_f).fold(0.0, f64::max);
    let l_max_g = agents.iter().map(|a| a.l_g).fold(0.0, f64::max);
    let constrained = agents.iter().filter(|a| a.constraint_dim() > 0);
    let c_min = constrained.clone().map(|a| a.c_g).fold(f64::INFINITY, f64::min);
    let c_min = if c_min.is_finite() { c_min } else { 0.0 };
    let c_max = constrained.map(|a| a.c_g).fold(0.0, f64::max);
    let ubar_mu = agents.iter().map(|a| a.mu).fold(f64::INFINITY, f64::min);
    let delta = agents.iter().map(|a| a.domain_radius).try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)));
    Ok(Instance {
        agents,
        bar_mu,
        bar_l,
        l_max_f,
        l_max_g,
        c_min,
        c_max,
        ubar_mu,
        delta,
        provenance: None,
        planted: None,
        reference: None,
    })
}

impl Instance {
    pub fn node_count(&self) -> usize {
        self.agents.len()
    }

    pub fn dim(&self) -> usize {
        self.agents[0].dim
    }

    pub fn is_affine(&self) -> bool {
        self.l_max_g == 0.0
    }

    /// `sum_i phi_i(x)` at a common point.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.agents.iter().map(|a| a.phi(x)).sum()
    }

    /// `sum_i phi_i(x_i)` at per-agent points.
    pub fn objective_split(&self, xs: &[DVector<f64>]) -> f64 {
        self.agents.iter().zip(xs).map(|(a, x)| a.phi(x)).sum()
    }
}

/// `(mu_bar/N + alpha lambda2)/2 - sqrt(((mu_bar/N - alpha lambda2)/2)^2 + 4 L_bar^2)`.
pub fn mu_alpha_static(bar_mu: f64, nodes: usize, alpha: f64, lambda2: f64, bar_l: f64) -> f64 {
    let a = bar_mu / nodes as f64;
    let b = alpha * lambda2;
    0.5 * (a + b) - (0.25 * (a - b) * (a - b) + 4.0 * bar_l * bar_l).sqrt()
}

pub fn mu_alpha_dynamic(bar_mu: f64, nodes: usize, alpha: f64, bar_l: f64) -> f64 {
    mu_alpha_static(bar_mu, nodes, alpha, 1.0, bar_l)
}

/// The network quantity that enters the regularised modulus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Topology {
    Static { lambda2: f64 },
    Dynamic,
}

/// Threshold `4 N L_bar^2 / (mu_bar lambda2)` above which `mu_alpha > 0`.
pub fn alpha_threshold(inst: &Instance, topology: Topology) -> f64 {
    let l2 = match topology {
        Topology::Static { lambda2 } => lambda2,
        Topology::Dynamic => 1.0,
    };
    4.0 * inst.node_count() as f64 * inst.bar_l * inst.bar_l / (inst.bar_mu * l2)
}

/// `(0, min mu_i)` when every agent is strongly convex, otherwise
/// `alpha = safety * threshold` with its modulus `mu_alpha`.
pub fn choose_alpha_mu(inst: &Instance, topology: Topology, safety_factor: f64) -> Result<(f64, f64)> {
    if !(safety_factor > 1.0) {
        return Err(invalid(format!("safety factor {safety_factor} must exceed 1")));
    }
    if inst.ubar_mu > 0.0 {
        return Ok((0.0, inst.ubar_mu));
    }
    if !(inst.bar_mu > 0.0) {
        return Err(Error::NotStronglyConvex);
    }
    let alpha = safety_factor * alpha_threshold(inst, topology);
    let mu = match topology {
        Topology::Static { lambda2 } => mu_alpha_static(inst.bar_mu, inst.node_count(), alpha, lambda2, inst.bar_l),
        Topology::Dynamic => mu_alpha_dynamic(inst.bar_mu, inst.node_count(), alpha, inst.bar_l),
    };
    if !(mu > 0.0) {
        return Err(Error::NotStronglyConvex);
    }
    Ok((alpha, mu))
}

fn agent_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Filled row by row so the stream order matches the row-major file layout.
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Projection onto an intersection of ellipsoids inside `||x|| <= D`.
///
/// The objective `(1/2)||x - x0||^2` is split equally over agents so each
/// `mu_i = 1/N`.
pub fn gen_ellipsoid_instance(n: usize, nodes: usize, radius: f64, seed: u64) -> Result<Instance> {
    if n == 0 || nodes == 0 || !(radius > 0.0) {
        return Err(invalid("ellipsoid instance needs n, N >= 1 and D > 0"));
    }
    let mut shared = agent_rng(seed, 0);
    let x0 = DVector::from_fn(n, |_, _| shared.random_range(-1.0..=1.0));
    let weight = 1.0 / nodes as f64;
    let mut agents = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let mut rng = agent_rng(seed, i as u64 + 1);
        let r = gaussian_matrix(&mut rng, n, n);
        let a = r.tr_mul(&r) / spectral_norm(&r);
        let a = (&a + a.transpose()) * 0.5;
        let b = gaussian_vector(&mut rng, n);
        let c = rng.random_range(0.5..=1.5);
        agents.push(AgentProblem::new(
            n,
            ProxFn::IndicatorBall { radius },
            SmoothFn::WeightedProximity { weight, center: x0.clone() },
            ConstraintMap::Quadratic { a, b, c },
            Cone::NonnegOrthant(1),
        )?);
    }
    let mut inst = aggregate_constants(agents)?;
    inst.provenance = Some(Provenance {
        family: "ellipsoid".into(),
        seed,
        params: vec![("n".into(), n as f64), ("N".into(), nodes as f64), ("D".into(), radius)],
    });
    Ok(inst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassoVariant {
    /// Every agent strongly convex.
    I,
    /// The last agent's data matrix is rank deficient.
    II,
}

/// The isotonic difference matrix: `A(l, l) = 1`, `A(l, l+1) = -1`.
pub fn isotonic_matrix(n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n.saturating_sub(1), n);
    for l in 0..n.saturating_sub(1) {
        a[(l, l)] = 1.0;
        a[(l, l + 1)] = -1.0;
    }
    a
}

/// Planted isotonic vector: floor(n/4) ascending entries in [-10, 0], the
/// same number ascending in [0, 10], zeros in between.
pub fn planted_isotonic(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let k = n / 4;
    let mut lo: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..=0.0)).collect();
    let mut hi: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=10.0)).collect();
    lo.sort_by(f64::total_cmp);
    hi.sort_by(f64::total_cmp);
    let mut x = DVector::zeros(n);
    for (j, v) in lo.into_iter().enumerate() {
        x[j] = v;
    }
    for (j, v) in hi.into_iter().enumerate() {
        x[n - k + j] = v;
    }
    x
}

/// Distributed constrained LASSO with isotonic constraints.
pub fn gen_classo_instance(
    n: usize,
    m: usize,
    nodes: usize,
    lambda: f64,
    seed: u64,
    variant: ClassoVariant,
) -> Result<Instance> {
    if m == 0 || n < 4 || nodes == 0 {
        return Err(invalid("classo instance needs m >= 1, n >= 4, N >= 1"));
    }
    if variant == ClassoVariant::I && m < n {
        return Err(invalid("classo variant I needs m >= n so every agent is strongly convex"));
    }
    if variant == ClassoVariant::II && nodes < 2 {
        return Err(invalid("classo variant II needs N >= 2"));
    }
    if !(lambda >= 0.0) {
        return Err(invalid("lambda must be nonnegative"));
    }
    let mut shared = agent_rng(seed, 0);
    let x_star = planted_isotonic(n, &mut shared);
    let radius = 2.0 * x_star.norm().max(1.0);
    let a = isotonic_matrix(n);
    let noise = Normal::new(0.0, 1e-3).expect("valid normal");
    let mut agents = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let mut rng = agent_rng(seed, i as u64 + 1);
        let raw = gaussian_matrix(&mut rng, m, n);
        let svd = raw.svd(true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let k = svd.singular_values.len();
        let mut s: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..=3.0)).collect();
        if variant == ClassoVariant::II && i == nodes - 1 {
            s.sort_by(f64::total_cmp);
            s[0] = 0.0;
        }
        let c = &u * DMatrix::from_diagonal(&DVector::from_vec(s)) * &vt;
        let eps = DVector::from_fn(n, |_, _| noise.sample(&mut rng));
        let d = &c * (&x_star + eps);
        agents.push(AgentProblem::new(
            n,
            ProxFn::L1PlusBall { lambda: lambda / nodes as f64, radius },
            SmoothFn::LeastSquares { c, d },
            ConstraintMap::Affine { a: a.clone(), b: DVector::zeros(n - 1) },
            Cone::NonnegOrthant(n - 1),
        )?);
    }
    let mut inst = aggregate_constants(agents)?;
    inst.planted = Some(x_star.as_slice().to_vec());
    inst.provenance = Some(Provenance {
        family: match variant {
            ClassoVariant::I => "classo_i".into(),
            ClassoVariant::II => "classo_ii".into(),
        },
        seed,
        params: vec![
            ("n".into(), n as f64),
            ("m".into(), m as f64),
            ("N".into(), nodes as f64),
            ("lambda".into(), lambda),
        ],
    });
    Ok(inst)
}
