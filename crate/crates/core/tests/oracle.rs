mod common;

use common::*;
use dpda::oracle::{apd_run, closed_form, kkt_residual, OracleMethod};
use dpda::problems::{aggregate_constants, gen_classo_instance, AgentProblem, ClassoVariant, SmoothFn};
use dpda::*;
use nalgebra::{DMatrix, DVector};

#[test]
fn apd_recovers_unconstrained_centre() {
    let a = v(&[0.5, -1.0, 2.0]);
    let inst = proximity_instance(&[a.clone(), a.clone()], &[1.0, 3.0], ProxFn::Zero);
    let sol = apd_run(&inst, 1e-10, 50_000);
    assert!(sol.verified);
    assert!((sol.x_star - a).norm() < 1e-9);
}

#[test]
fn single_ball_constraint_projects_radially() {
    let x0 = v(&[3.0, -1.0, 2.0]);
    let c = 0.8;
    let inst = single_ball_instance(&x0, c, 10.0);
    let sol = apd_solve(&inst, 1e-11, 200_000).unwrap();
    let expected = &x0 * ((2.0 * c).sqrt() / x0.norm());
    assert!((&sol.x_star - &expected).norm() < 1e-8, "{} vs {}", sol.x_star, expected);
    assert!(sol.theta_star[0][0] > 0.0);
    assert_eq!(sol.theta_star[1].len(), 0);
}

#[test]
fn closed_form_ball_projection() {
    let centres = [v(&[4.0, 0.0]), v(&[2.0, 2.0])];
    let inst = proximity_instance(&centres, &[1.0, 1.0], ProxFn::IndicatorBall { radius: 1.0 });
    let sol = apd_solve(&inst, 1e-10, 10).unwrap();
    assert_eq!(sol.method, OracleMethod::ClosedForm);
    let m = v(&[3.0, 1.0]);
    assert!((sol.x_star.clone() - &m / m.norm()).norm() < 1e-15);
    assert!(sol.kkt_residual <= 1e-8);
    assert!(closed_form(&gen_classo_instance(4, 5, 2, 0.1, 1, ClassoVariant::I).unwrap()).is_none());
}

#[test]
fn rejects_non_strongly_convex_sums() {
    let agents = vec![AgentProblem::new(
        2,
        ProxFn::Zero,
        SmoothFn::Zero,
        dpda::problems::ConstraintMap::None,
        Cone::NonnegOrthant(0),
    )
    .unwrap()];
    let inst = aggregate_constants(agents).unwrap();
    assert_eq!(apd_solve(&inst, 1e-8, 10).unwrap_err(), Error::NotStronglyConvex);
}

#[test]
fn iteration_cap_is_reported() {
    let inst = gen_classo_instance(6, 7, 3, 0.1, 2, ClassoVariant::I).unwrap();
    assert!(matches!(apd_solve(&inst, 1e-14, 5), Err(Error::MaxIterations { .. })));
}

/// Brute-force KKT enumeration for `min sum_i (1/2)||C_i x - d_i||^2 + lam ||x||_1`
/// subject to `A x <= 0`, ignoring the (inactive) norm ball.
fn enumerate_classo(inst: &Instance) -> DVector<f64> {
    let n = inst.dim();
    let mut h = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    let mut lam = 0.0;
    let mut a = DMatrix::zeros(0, n);
    for ag in &inst.agents {
        let SmoothFn::LeastSquares { c, d } = &ag.f else { panic!("expected least squares") };
        h += c.tr_mul(c);
        q += c.tr_mul(d);
        lam += ag.rho.l1_weight();
        if let dpda::problems::ConstraintMap::Affine { a: ai, .. } = &ag.g {
            a = ai.clone();
        }
    }
    let rows = a.nrows();
    let tol = 1e-9;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for pattern in 0..3usize.pow(n as u32) {
        let signs: Vec<f64> = (0..n).map(|j| ((pattern / 3usize.pow(j as u32)) % 3) as f64 - 1.0).collect();
        let free: Vec<usize> = (0..n).filter(|&j| signs[j] != 0.0).collect();
        for mask in 0..(1usize << rows) {
            let act: Vec<usize> = (0..rows).filter(|&l| mask >> l & 1 == 1).collect();
            let size = free.len() + act.len();
            let mut k = DMatrix::zeros(size, size);
            let mut rhs = DVector::zeros(size);
            for (r, &j) in free.iter().enumerate() {
                for (c, &jj) in free.iter().enumerate() {
                    k[(r, c)] = h[(j, jj)];
                }
                for (c, &l) in act.iter().enumerate() {
                    k[(r, free.len() + c)] = a[(l, j)];
                    k[(free.len() + c, r)] = a[(l, j)];
                }
                rhs[r] = q[j] - lam * signs[j];
            }
            let sol = if size == 0 {
                DVector::zeros(0)
            } else {
                match k.clone().full_piv_lu().solve(&rhs) {
                    Some(sol) => sol,
                    None => continue,
                }
            };
            if (&k * &sol - &rhs).norm() > 1e-9 * (1.0 + rhs.norm()) {
                continue;
            }
            let mut x = DVector::zeros(n);
            for (r, &j) in free.iter().enumerate() {
                x[j] = sol[r];
            }
            let mut theta = DVector::zeros(rows);
            for (c, &l) in act.iter().enumerate() {
                theta[l] = sol[free.len() + c];
            }
            let signs_ok = free.iter().all(|&j| x[j] * signs[j] >= -tol);
            let dual_ok = theta.iter().all(|&t| t >= -tol);
            let primal_ok = (&a * &x).iter().all(|&g| g <= tol);
            let resid = &q - &h * &x - a.tr_mul(&theta);
            let zero_ok = (0..n).filter(|j| signs[*j] == 0.0).all(|j| resid[j].abs() <= lam + tol);
            if signs_ok && dual_ok && primal_ok && zero_ok {
                let obj = 0.5 * x.dot(&(&h * &x)) - q.dot(&x) + lam * x.lp_norm(1);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, x));
                }
            }
        }
    }
    best.expect("some KKT point").1
}

#[test]
fn tiny_classo_matches_enumeration() {
    for seed in 1..=4 {
        for lambda in [0.05, 2.0] {
            let inst = gen_classo_instance(4, 5, 2, lambda, seed, ClassoVariant::I).unwrap();
            let sol = apd_solve(&inst, 1e-11, 400_000).unwrap();
            let brute = enumerate_classo(&inst);
            assert!(brute.norm() < inst.agents[0].rho.radius().unwrap());
            assert!(
                (&sol.x_star - &brute).norm() <= 1e-8 * brute.norm().max(1.0),
                "seed {seed}: {} vs {}",
                sol.x_star,
                brute
            );
        }
    }
}

#[test]
fn objective_scaling_keeps_the_minimiser() {
    let base = gen_classo_instance(5, 6, 3, 0.2, 6, ClassoVariant::I).unwrap();
    let s1 = apd_solve(&base, 1e-11, 400_000).unwrap();
    let factor = 3.0;
    let agents = base
        .agents
        .iter()
        .map(|a| AgentProblem::new(a.dim, a.rho.scaled(factor), a.f.scaled(factor), a.g.clone(), a.cone).unwrap())
        .collect();
    let scaled = aggregate_constants(agents).unwrap();
    let s2 = apd_solve(&scaled, 1e-11, 400_000).unwrap();
    assert!((&s1.x_star - &s2.x_star).norm() <= 1e-6 * s1.x_star.norm());
    let v1 = dpda::metrics::optimal_value(&base, &s1);
    let v2 = dpda::metrics::optimal_value(&scaled, &s2);
    assert!((v1 * factor - v2).abs() <= 1e-6 * v2.abs().max(1.0), "{v1} {v2}");
}

#[test]
fn solves_are_deterministic() {
    let inst = gen_ellipsoid_instance(5, 3, 2.0, 4).unwrap();
    assert_eq!(apd_solve(&inst, 1e-9, 200_000).unwrap(), apd_solve(&inst, 1e-9, 200_000).unwrap());
}

#[test]
fn kkt_residual_detects_infeasibility() {
    let inst = gen_ellipsoid_instance(4, 3, 5.0, 2).unwrap();
    let sol = apd_solve(&inst, 1e-9, 200_000).unwrap();
    assert!(kkt_residual(&inst, &sol.x_star, &sol.theta_star) <= 1e-9);
    let far = DVector::from_element(4, 2.4);
    assert!(kkt_residual(&inst, &far, &sol.theta_star) > 1e-3);
}

#[test]
fn longer_runs_never_worsen_the_residual() {
    let inst = gen_classo_instance(6, 7, 3, 0.1, 9, ClassoVariant::II).unwrap();
    let r: Vec<f64> = [50, 200, 800, 3200].iter().map(|&k| apd_run(&inst, 1e-14, k).kkt_residual).collect();
    assert!(r.windows(2).all(|w| w[1] <= w[0]), "{r:?}");
    assert!(r[3] < r[0]);
}

#[test]
fn objective_scaling_scales_unique_duals() {
    // Ellipsoid constraints have independent gradients at x*, so theta* is unique.
    let base = gen_ellipsoid_instance(4, 3, 1.5, 3).unwrap();
    let factor = 2.5;
    let agents = base
        .agents
        .iter()
        .map(|a| AgentProblem::new(a.dim, a.rho.scaled(factor), a.f.scaled(factor), a.g.clone(), a.cone).unwrap())
        .collect();
    let scaled = aggregate_constants(agents).unwrap();
    let s1 = apd_solve(&base, 1e-11, 400_000).unwrap();
    let s2 = apd_solve(&scaled, 1e-11, 400_000).unwrap();
    assert!((&s1.x_star - &s2.x_star).norm() <= 1e-6 * s1.x_star.norm().max(1.0));
    assert!(s1.theta_norm() > 1e-3, "constraints inactive; pick another seed");
    for (a, b) in s1.theta_star.iter().zip(&s2.theta_star) {
        assert!((a * factor - b).norm() <= 1e-6 * (1.0 + b.norm()), "{a} {b}");
    }
}
