//! Cone projections, proximal maps and ball/consensus-set utilities.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::blocks;
use crate::error::{invalid, Result};
use crate::mixing::exact_average;

/// A closed convex cone `K` of dimension `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "dim")]
pub enum Cone {
    NonnegOrthant(usize),
    Zero(usize),
    /// `{(t, x) : ||x|| <= t}` with `t` the first coordinate.
    SecondOrder(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::NonnegOrthant(m) | Cone::Zero(m) | Cone::SecondOrder(m) => m,
        }
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Cone::NonnegOrthant(_) => v.map(|x| x.max(0.0)),
            Cone::Zero(_) => DVector::zeros(v.len()),
            Cone::SecondOrder(_) => project_soc(v),
        }
    }

    /// Projection onto the dual cone `K*`.
    pub fn project_dual(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Cone::Zero(_) => v.clone(),
            // Orthant and second-order cone are self-dual.
            _ => self.project(v),
        }
    }

    /// Projection onto `-K`.
    pub fn project_neg(&self, v: &DVector<f64>) -> DVector<f64> {
        -self.project(&-v)
    }

    /// `d_{-K}(v)`.
    pub fn distance_to_neg(&self, v: &DVector<f64>) -> f64 {
        (v - self.project_neg(v)).norm()
    }

    /// `d_{K*}(v)`.
    pub fn distance_to_dual(&self, v: &DVector<f64>) -> f64 {
        (v - self.project_dual(v)).norm()
    }

    pub fn contains_dual(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.distance_to_dual(v) <= tol
    }
}

fn project_soc(v: &DVector<f64>) -> DVector<f64> {
    if v.is_empty() {
        return v.clone();
    }
    let t = v[0];
    let x = v.rows(1, v.len() - 1);
    let nx = x.norm();
    if nx <= t {
        v.clone()
    } else if nx <= -t {
        DVector::zeros(v.len())
    } else {
        let a = 0.5 * (t + nx);
        let mut out = DVector::zeros(v.len());
        out[0] = a;
        out.rows_mut(1, v.len() - 1).copy_from(&(x * (a / nx)));
        out
    }
}

/// Radial clamp onto the origin-centred ball of radius `radius`.
pub fn project_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = v.norm();
    if n <= radius {
        v.clone()
    } else {
        v * (radius / n)
    }
}

pub fn soft_threshold(z: &DVector<f64>, t: f64) -> DVector<f64> {
    z.map(|x| x.signum() * (x.abs() - t).max(0.0))
}

/// `prox_{gamma sigma_S}(z) = z - gamma P_S(z / gamma)`.
pub fn prox_support_via_moreau(
    project: impl Fn(&DVector<f64>) -> DVector<f64>,
    z: &DVector<f64>,
    gamma: f64,
) -> DVector<f64> {
    z - project(&(z / gamma)) * gamma
}

/// `||omega - P_C(omega)||` for the consensus subspace `C`.
pub fn distance_to_consensus(omega: &[DVector<f64>]) -> f64 {
    blocks::dist(omega, &exact_average(omega))
}

/// The prox-friendly term `rho_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProxFn {
    Zero,
    L1 {
        lambda: f64,
    },
    /// `lambda ||x||_1` plus the indicator of `||x|| <= radius`.
    L1PlusBall {
        lambda: f64,
        radius: f64,
    },
    IndicatorBall {
        radius: f64,
    },
}

impl ProxFn {
    pub fn prox(&self, z: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
        if !(tau >= 0.0) {
            return Err(invalid(format!("prox step {tau} must be nonnegative")));
        }
        Ok(match *self {
            ProxFn::Zero => z.clone(),
            ProxFn::L1 { lambda } => soft_threshold(z, tau * lambda),
            ProxFn::L1PlusBall { lambda, radius } => project_ball(&soft_threshold(z, tau * lambda), radius),
            ProxFn::IndicatorBall { radius } => project_ball(z, radius),
        })
    }

    /// `rho(x)`, infinite outside the domain (with a relative slack of 1e-9).
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let outside = |r: f64| x.norm() > r * (1.0 + 1e-9);
        match *self {
            ProxFn::Zero => 0.0,
            ProxFn::L1 { lambda } => lambda * x.lp_norm(1),
            ProxFn::L1PlusBall { lambda, radius } => {
                if outside(radius) {
                    f64::INFINITY
                } else {
                    lambda * x.lp_norm(1)
                }
            }
            ProxFn::IndicatorBall { radius } => {
                if outside(radius) {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }

    pub fn l1_weight(&self) -> f64 {
        match *self {
            ProxFn::L1 { lambda } | ProxFn::L1PlusBall { lambda, .. } => lambda,
            _ => 0.0,
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match *self {
            ProxFn::L1PlusBall { radius, .. } | ProxFn::IndicatorBall { radius } => Some(radius),
            _ => None,
        }
    }

    pub fn in_domain(&self, x: &DVector<f64>) -> bool {
        self.value(x).is_finite()
    }

    fn from_parts(lambda: f64, radius: Option<f64>) -> Self {
        match (lambda > 0.0, radius) {
            (false, None) => ProxFn::Zero,
            (true, None) => ProxFn::L1 { lambda },
            (false, Some(radius)) => ProxFn::IndicatorBall { radius },
            (true, Some(radius)) => ProxFn::L1PlusBall { lambda, radius },
        }
    }

    /// `sum_i rho_i` as a single prox function: the l1 weights add and the
    /// balls intersect to the smallest one.
    pub fn sum<'a>(parts: impl IntoIterator<Item = &'a ProxFn>) -> ProxFn {
        let (mut lambda, mut radius) = (0.0, None::<f64>);
        for p in parts {
            lambda += p.l1_weight();
            if let Some(r) = p.radius() {
                radius = Some(radius.map_or(r, |s| s.min(r)));
            }
        }
        Self::from_parts(lambda, radius)
    }

    /// The same function scaled by `c > 0` (balls are unaffected).
    pub fn scaled(&self, c: f64) -> ProxFn {
        Self::from_parts(self.l1_weight() * c, self.radius())
    }
}
