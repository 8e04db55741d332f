#![allow(dead_code)]

use dpda::problems::{aggregate_constants, AgentProblem, ConstraintMap, SmoothFn};
use dpda::*;
use nalgebra::{DMatrix, DVector};

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

/// `f_i = (w_i/2)||x - c_i||^2`, no conic constraint.
pub fn proximity_instance(centres: &[DVector<f64>], weights: &[f64], rho: ProxFn) -> Instance {
    let agents = centres
        .iter()
        .zip(weights)
        .map(|(c, &w)| {
            AgentProblem::new(
                c.len(),
                rho,
                SmoothFn::WeightedProximity { weight: w, center: c.clone() },
                ConstraintMap::None,
                Cone::NonnegOrthant(0),
            )
            .unwrap()
        })
        .collect();
    aggregate_constants(agents).unwrap()
}

/// `(1/2)||x - x0||^2` shared by two agents, one of which carries
/// `(1/2)||x||^2 - c <= 0`.
pub fn single_ball_instance(x0: &DVector<f64>, c: f64, radius: f64) -> Instance {
    let n = x0.len();
    let rho = ProxFn::IndicatorBall { radius };
    let half = SmoothFn::WeightedProximity { weight: 0.5, center: x0.clone() };
    let ball = ConstraintMap::Quadratic { a: DMatrix::identity(n, n), b: DVector::zeros(n), c };
    let agents = vec![
        AgentProblem::new(n, rho, half.clone(), ball, Cone::NonnegOrthant(1)).unwrap(),
        AgentProblem::new(n, rho, half, ConstraintMap::None, Cone::NonnegOrthant(0)).unwrap(),
    ];
    aggregate_constants(agents).unwrap()
}

pub fn with_reference(mut inst: Instance) -> Instance {
    inst.reference = Some(apd_solve(&inst, 1e-10, 400_000).expect("oracle converges"));
    inst
}

pub fn log_schedule() -> CommSchedule {
    CommSchedule::Logarithmic { c: 0.0, varsigma: (-1f64).exp() }
}
