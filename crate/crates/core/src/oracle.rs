//! Centralised reference solver: accelerated primal-dual iterations on the
//! aggregated problem, an active-set Newton polish, and a KKT checker.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{ConstraintMap, Instance, SmoothFn};
use crate::prox::{project_ball, Cone, ProxFn};
use crate::serde_la;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    Apd,
    ApdPolished,
    ClosedForm,
}

/// A primal-dual pair `(x*, theta*)` with its verification record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    #[serde(with = "serde_la::vec")]
    pub x_star: DVector<f64>,
    #[serde(with = "serde_la::vecs")]
    pub theta_star: Vec<DVector<f64>>,
    pub kkt_residual: f64,
    pub iterations_used: usize,
    pub method: OracleMethod,
    pub tolerance: f64,
    pub verified: bool,
}

impl OracleSolution {
    pub fn theta_norm(&self) -> f64 {
        self.theta_star.iter().map(|t| t.norm_squared()).sum::<f64>().sqrt()
    }

    /// `||theta*||_C = sqrt(sum_i C_{g_i}^2 ||theta_i*||^2)`.
    pub fn theta_weighted_norm(&self, inst: &Instance) -> f64 {
        inst.agents.iter().zip(&self.theta_star).map(|(a, t)| a.c_g * a.c_g * t.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Aggregated prox term `sum_i rho_i`.
pub fn total_prox(inst: &Instance) -> ProxFn {
    ProxFn::sum(inst.agents.iter().map(|a| &a.rho))
}

fn total_grad(inst: &Instance, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    for a in &inst.agents {
        g += a.f_grad(x);
    }
    g
}

fn lagrangian_grad(inst: &Instance, x: &DVector<f64>, theta: &[DVector<f64>]) -> DVector<f64> {
    let mut g = total_grad(inst, x);
    for (a, t) in inst.agents.iter().zip(theta) {
        if a.constraint_dim() > 0 {
            g += a.jt_mul(x, t);
        }
    }
    g
}

/// First-order optimality residual: the largest of prox-gradient
/// stationarity, primal infeasibility, dual infeasibility and
/// complementarity.
pub fn kkt_residual(inst: &Instance, x: &DVector<f64>, theta: &[DVector<f64>]) -> f64 {
    let tau = 1.0 / (inst.l_max_f * inst.node_count() as f64 + 1.0);
    let rho = total_prox(inst);
    let step = x - lagrangian_grad(inst, x, theta) * tau;
    let stat = (x - rho.prox(&step, tau).expect("positive step")).norm() / tau;
    let (mut primal, mut dual, mut comp) = (0.0, 0.0, 0.0);
    for (a, t) in inst.agents.iter().zip(theta) {
        if a.constraint_dim() == 0 {
            continue;
        }
        let g = a.g_value(x);
        primal += a.cone.distance_to_neg(&g);
        dual += a.cone.distance_to_dual(t);
        comp += t.dot(&g).abs();
    }
    stat.max(primal).max(dual).max(comp)
}

/// Closed form for unconstrained weighted-proximity objectives with a ball
/// (or no) prox term: the projection of the weighted centre.
pub fn closed_form(inst: &Instance) -> Option<OracleSolution> {
    let mut wsum = 0.0;
    let mut centre = DVector::zeros(inst.dim());
    for a in &inst.agents {
        if a.constraint_dim() > 0 {
            return None;
        }
        match &a.f {
            SmoothFn::WeightedProximity { weight, center } => {
                wsum += weight;
                centre += center * *weight;
            }
            SmoothFn::Zero => {}
            SmoothFn::LeastSquares { .. } => return None,
        }
    }
    if !(wsum > 0.0) {
        return None;
    }
    let x = match total_prox(inst) {
        ProxFn::Zero => centre / wsum,
        ProxFn::IndicatorBall { radius } => project_ball(&(centre / wsum), radius),
        _ => return None,
    };
    let theta = inst.agents.iter().map(|a| DVector::zeros(a.constraint_dim())).collect::<Vec<_>>();
    let kkt = kkt_residual(inst, &x, &theta);
    Some(OracleSolution {
        x_star: x,
        theta_star: theta,
        kkt_residual: kkt,
        iterations_used: 0,
        method: OracleMethod::ClosedForm,
        tolerance: 0.0,
        verified: true,
    })
}

struct Setup {
    rho: ProxFn,
    mu: f64,
    l_phi: f64,
    l_yx: f64,
    l_g_sum: f64,
}

fn setup(inst: &Instance) -> Setup {
    let n = inst.dim();
    let mut h = DMatrix::zeros(n, n);
    for a in &inst.agents {
        h += a.f.hessian(n);
    }
    let eig = SymmetricEigen::new(h).eigenvalues;
    let (lo, hi) = (eig.min().max(0.0), eig.max().max(0.0));
    Setup {
        rho: total_prox(inst),
        mu: lo,
        l_phi: hi - lo,
        l_yx: inst.agents.iter().map(|a| a.c_g * a.c_g).sum::<f64>().sqrt(),
        l_g_sum: inst.agents.iter().map(|a| a.l_g).sum(),
    }
}

/// Prox of `rho + (mu/2)||.||^2` with step `t`.
fn prox_psi(rho: &ProxFn, mu: f64, z: &DVector<f64>, t: f64) -> DVector<f64> {
    let s = 1.0 + t * mu;
    rho.prox(&(z / s), t / s).expect("positive step")
}

/// Runs the accelerated primal-dual recursion (dual step first), restarting
/// with a doubled dual bound whenever the dual iterate leaves it, and tries
/// an active-set polish every `polish_every` iterations. Always returns the
/// best pair found.
pub fn apd_run(inst: &Instance, tolerance: f64, max_iters: usize) -> OracleSolution {
    let st = setup(inst);
    let n = inst.dim();
    let theta0: Vec<DVector<f64>> = inst.agents.iter().map(|a| DVector::zeros(a.constraint_dim())).collect();
    let mut x = match st.rho.radius() {
        Some(r) => project_ball(&DVector::zeros(n), r),
        None => DVector::zeros(n),
    };
    let mut y = theta0.clone();
    let mut bound = 10.0f64;
    let mut best = OracleSolution {
        kkt_residual: kkt_residual(inst, &x, &y),
        x_star: x.clone(),
        theta_star: y.clone(),
        iterations_used: 0,
        method: OracleMethod::Apd,
        tolerance,
        verified: false,
    };
    let polish_every = 200;
    let mut k_total = 0;
    'restart: while k_total < max_iters {
        let dy0 = if st.l_yx > 0.0 { 1.0 / st.l_yx } else { 1.0 };
        let denom = (st.l_phi + st.l_g_sum * bound + dy0 * st.l_yx * st.l_yx).max(st.l_phi + st.mu).max(1e-12);
        let (mut dx, mut dy, mut eta) = (1.0 / denom, dy0, 0.0);
        let mut x_prev = x.clone();
        while k_total < max_iters {
            k_total += 1;
            let mut y_new = Vec::with_capacity(y.len());
            for (i, a) in inst.agents.iter().enumerate() {
                if a.constraint_dim() == 0 {
                    y_new.push(y[i].clone());
                    continue;
                }
                let p = a.g_value(&x) * (1.0 + eta) - a.g_value(&x_prev) * eta;
                y_new.push(a.cone.project_dual(&(&y[i] + p * dy)));
            }
            let ynorm = y_new.iter().map(|t| t.norm_squared()).sum::<f64>().sqrt();
            if st.l_g_sum > 0.0 && ynorm > bound {
                bound *= 2.0;
                continue 'restart;
            }
            let grad = lagrangian_grad(inst, &x, &y_new) - &x * st.mu;
            let x_new = prox_psi(&st.rho, st.mu, &(&x - grad * dx), dx);
            let eta_next = 1.0 / (1.0 + st.mu * dx).sqrt();
            dx *= eta_next;
            dy /= eta_next;
            eta = eta_next;
            x_prev = std::mem::replace(&mut x, x_new);
            y = y_new;
            if k_total % polish_every == 0 || k_total == max_iters {
                consider(inst, &mut best, &x, &y, k_total, OracleMethod::Apd);
                if let Some((px, py)) = polish(inst, &x, &y) {
                    consider(inst, &mut best, &px, &py, k_total, OracleMethod::ApdPolished);
                }
                if best.kkt_residual <= tolerance {
                    best.verified = true;
                    return best;
                }
            }
        }
    }
    best.verified = best.kkt_residual <= tolerance;
    best
}

fn consider(
    inst: &Instance,
    best: &mut OracleSolution,
    x: &DVector<f64>,
    y: &[DVector<f64>],
    k: usize,
    m: OracleMethod,
) {
    let r = kkt_residual(inst, x, y);
    if r < best.kkt_residual {
        best.kkt_residual = r;
        best.x_star = x.clone();
        best.theta_star = y.to_vec();
        best.method = m;
    }
    best.iterations_used = k;
}

/// Reference solution: closed form when available, otherwise the APD run;
/// fails if the KKT residual stays above `tolerance`.
pub fn apd_solve(inst: &Instance, tolerance: f64, max_iters: usize) -> Result<OracleSolution> {
    if !(inst.bar_mu > 0.0) {
        return Err(Error::NotStronglyConvex);
    }
    if let Some(sol) = closed_form(inst) {
        if sol.kkt_residual <= tolerance {
            return Ok(sol);
        }
    }
    let sol = apd_run(inst, tolerance, max_iters);
    if sol.verified {
        Ok(sol)
    } else {
        Err(Error::MaxIterations { iterations: sol.iterations_used, residual: sol.kkt_residual })
    }
}

/// A constraint row `(agent, row)` treated as an equality by the polish.
type Row = (usize, usize);

fn row_grad(inst: &Instance, (i, r): Row, x: &DVector<f64>) -> DVector<f64> {
    inst.agents[i].g_jacobian(x).row(r).transpose()
}

fn row_hessian(inst: &Instance, (i, _): Row) -> Option<&DMatrix<f64>> {
    match &inst.agents[i].g {
        ConstraintMap::Quadratic { a, .. } => Some(a),
        _ => None,
    }
}

/// Active-set Newton refinement of an approximate KKT pair. Only handles
/// orthant and zero cones; returns `None` when it cannot make progress.
pub fn polish(
    inst: &Instance,
    x0: &DVector<f64>,
    theta0: &[DVector<f64>],
) -> Option<(DVector<f64>, Vec<DVector<f64>>)> {
    if inst.agents.iter().any(|a| matches!(a.cone, Cone::SecondOrder(_)) && a.constraint_dim() > 0) {
        return None;
    }
    let n = inst.dim();
    let rho = total_prox(inst);
    let lambda = rho.l1_weight();
    let radius = rho.radius();
    let scale = 1.0 + x0.amax();
    let tol_x = 1e-6 * scale;

    let mut zero: Vec<bool> = (0..n).map(|j| lambda > 0.0 && x0[j].abs() <= tol_x).collect();
    let mut sign: Vec<f64> = (0..n).map(|j| if x0[j] >= 0.0 { 1.0 } else { -1.0 }).collect();
    let mut active: Vec<Row> = Vec::new();
    for (i, a) in inst.agents.iter().enumerate() {
        let g = a.g_value(x0);
        for r in 0..a.constraint_dim() {
            let is_active = match a.cone {
                Cone::Zero(_) => true,
                _ => g[r] >= -1e-6 * scale || theta0[i][r] > 1e-8,
            };
            if is_active {
                active.push((i, r));
            }
        }
    }
    let mut ball = radius.is_some_and(|r| x0.norm() >= r * (1.0 - 1e-6));

    let mut x = x0.clone();
    for _outer in 0..30 {
        let free: Vec<usize> = (0..n).filter(|&j| !zero[j]).collect();
        for &j in (0..n).filter(|&j| zero[j]).collect::<Vec<_>>().iter() {
            x[j] = 0.0;
        }
        let nf = free.len();
        let na = active.len();
        let size = nf + na + usize::from(ball);
        let mut mult = DVector::zeros(na + usize::from(ball));
        for (a_idx, &(i, r)) in active.iter().enumerate() {
            mult[a_idx] = theta0[i][r].max(0.0);
        }
        // Newton on the equality-constrained KKT system.
        let mut converged = false;
        for _newton in 0..50 {
            let mut res = DVector::zeros(size);
            let mut jac = DMatrix::zeros(size, size);
            let grad_f = total_grad(inst, &x);
            let mut hess = DMatrix::zeros(n, n);
            for a in &inst.agents {
                hess += a.f.hessian(n);
            }
            let mut stat = grad_f;
            for (j, s) in sign.iter().enumerate() {
                if !zero[j] {
                    stat[j] += lambda * s;
                }
            }
            for (a_idx, &row) in active.iter().enumerate() {
                let gr = row_grad(inst, row, &x);
                stat += &gr * mult[a_idx];
                if let Some(h) = row_hessian(inst, row) {
                    hess += h * mult[a_idx];
                }
                let (i, r) = row;
                res[nf + a_idx] = inst.agents[i].g_value(&x)[r];
                for (c, &j) in free.iter().enumerate() {
                    jac[(c, nf + a_idx)] = gr[j];
                    jac[(nf + a_idx, c)] = gr[j];
                }
            }
            if ball {
                let nu = mult[na];
                stat += &x * nu;
                hess += DMatrix::identity(n, n) * nu;
                let r = radius.unwrap();
                res[nf + na] = 0.5 * (x.norm_squared() - r * r);
                for (c, &j) in free.iter().enumerate() {
                    jac[(c, nf + na)] = x[j];
                    jac[(nf + na, c)] = x[j];
                }
            }
            for (c, &j) in free.iter().enumerate() {
                res[c] = stat[j];
                for (d, &l) in free.iter().enumerate() {
                    jac[(c, d)] = hess[(j, l)];
                }
            }
            if res.amax() <= 1e-13 * scale {
                converged = true;
                break;
            }
            let step = jac.svd(true, true).solve(&(-&res), 1e-11).ok()?;
            for (c, &j) in free.iter().enumerate() {
                x[j] += step[c];
            }
            for m in 0..mult.len() {
                mult[m] += step[nf + m];
            }
            if !x.iter().all(|v| v.is_finite()) {
                return None;
            }
        }
        if !converged {
            // Accept the last Newton point anyway; the KKT check decides.
        }
        // Assemble the multipliers and test the active-set guesses.
        let mut theta: Vec<DVector<f64>> = inst.agents.iter().map(|a| DVector::zeros(a.constraint_dim())).collect();
        for (a_idx, &(i, r)) in active.iter().enumerate() {
            theta[i][r] = mult[a_idx];
        }
        let mut changed = false;
        // Multipliers of inequality rows must be nonnegative.
        let mut keep = Vec::with_capacity(active.len());
        for (a_idx, &(i, r)) in active.iter().enumerate() {
            let is_zero_cone = matches!(inst.agents[i].cone, Cone::Zero(_));
            if !is_zero_cone && mult[a_idx] < -1e-12 {
                theta[i][r] = 0.0;
                changed = true;
            } else {
                keep.push((i, r));
            }
        }
        active = keep;
        for (i, a) in inst.agents.iter().enumerate() {
            if matches!(a.cone, Cone::Zero(_)) {
                continue;
            }
            let g = a.g_value(&x);
            for r in 0..a.constraint_dim() {
                if g[r] > 1e-12 * scale && !active.contains(&(i, r)) {
                    active.push((i, r));
                    changed = true;
                }
            }
        }
        if ball && mult[mult.len() - 1] < -1e-12 {
            ball = false;
            changed = true;
        } else if !ball && radius.is_some_and(|r| x.norm() > r * (1.0 + 1e-12)) {
            ball = true;
            changed = true;
        }
        // Sign consistency of free coordinates and subgradient bounds on zeros.
        let nu = if ball { mult[mult.len() - 1].max(0.0) } else { 0.0 };
        let smooth = lagrangian_grad(inst, &x, &theta) + &x * nu;
        for j in 0..n {
            if zero[j] {
                if smooth[j].abs() > lambda * (1.0 + 1e-10) {
                    zero[j] = false;
                    sign[j] = -smooth[j].signum();
                    changed = true;
                }
            } else if lambda > 0.0 && x[j] * sign[j] < 0.0 {
                zero[j] = true;
                changed = true;
            }
        }
        if !changed {
            return Some((x, theta));
        }
    }
    None
}
