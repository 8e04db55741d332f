use dpda::prox::{project_ball, soft_threshold};
use dpda::*;
use nalgebra::DVector;
use proptest::prelude::*;

fn vecs(len: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-5.0f64..5.0, len).prop_map(DVector::from_vec)
}

fn cones() -> impl Strategy<Value = Cone> {
    prop_oneof![
        (1usize..6).prop_map(Cone::NonnegOrthant),
        (1usize..6).prop_map(Cone::Zero),
        (2usize..6).prop_map(Cone::SecondOrder),
    ]
}

fn cone_and_points() -> impl Strategy<Value = (Cone, DVector<f64>, Vec<DVector<f64>>)> {
    cones().prop_flat_map(|k| (Just(k), vecs(k.dim()), prop::collection::vec(vecs(k.dim()), 8)))
}

fn in_soc(v: &DVector<f64>) -> bool {
    v.rows(1, v.len() - 1).norm() <= v[0] + 1e-12
}

fn prox_fns() -> impl Strategy<Value = ProxFn> {
    prop_oneof![
        Just(ProxFn::Zero),
        (0.0f64..3.0).prop_map(|lambda| ProxFn::L1 { lambda }),
        (0.1f64..4.0).prop_map(|radius| ProxFn::IndicatorBall { radius }),
        (0.0f64..3.0, 0.1f64..4.0).prop_map(|(lambda, radius)| ProxFn::L1PlusBall { lambda, radius }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cone_projection_is_obtuse((k, v, members) in cone_and_points()) {
        let p = k.project(&v);
        match k {
            Cone::NonnegOrthant(_) => prop_assert!(p.iter().all(|&x| x >= 0.0)),
            Cone::Zero(_) => prop_assert!(p.norm() == 0.0),
            Cone::SecondOrder(_) => prop_assert!(in_soc(&p)),
        }
        prop_assert!((k.project(&p) - &p).norm() <= 1e-12 * (1.0 + p.norm()));
        for w in members.iter().map(|w| k.project(w)) {
            prop_assert!((&v - &p).dot(&(w - &p)) <= 1e-10);
        }
    }

    #[test]
    fn self_dual_cones_split_orthogonally((k, v, _) in cone_and_points()) {
        // Moreau decomposition: v = P_K(v) + P_{K polar}(v), with the two parts orthogonal.
        let plus = k.project(&v);
        let polar = match k {
            Cone::Zero(_) => v.clone(),
            _ => k.project_neg(&v),
        };
        prop_assert!((&plus + &polar - &v).norm() <= 1e-12 * (1.0 + v.norm()));
        prop_assert!(plus.dot(&polar).abs() <= 1e-12 * (1.0 + v.norm_squared()));
        prop_assert!(k.contains_dual(&k.project_dual(&v), 1e-12));
    }

    #[test]
    fn moreau_identity_for_box_and_ball(z in vecs(5)) {
        // S = unit box, sigma_S = l1: P_S(z) + soft_threshold(z, 1) = z.
        let clamp = z.map(|x| x.clamp(-1.0, 1.0));
        prop_assert!((clamp + soft_threshold(&z, 1.0) - &z).amax() <= 1e-12);
        // S = unit ball, sigma_S = l2: the prox is block shrinkage.
        let shrink = &z * (1.0 - 1.0 / z.norm()).max(0.0);
        prop_assert!((project_ball(&z, 1.0) + shrink - &z).amax() <= 1e-12);
    }

    #[test]
    fn soft_threshold_satisfies_optimality(z in vecs(6), tau in 0.0f64..2.0, lambda in 0.0f64..3.0) {
        let p = ProxFn::L1 { lambda }.prox(&z, tau).unwrap();
        let t = tau * lambda;
        for j in 0..z.len() {
            if p[j] != 0.0 {
                prop_assert!((p[j] - z[j] + t * p[j].signum()).abs() <= 1e-12);
            } else {
                prop_assert!(z[j].abs() <= t + 1e-12);
            }
        }
    }

    #[test]
    fn prox_is_firmly_nonexpansive(rho in prox_fns(), z1 in vecs(4), z2 in vecs(4), tau in 0.0f64..3.0) {
        let p1 = rho.prox(&z1, tau).unwrap();
        let p2 = rho.prox(&z2, tau).unwrap();
        let d = &p1 - &p2;
        prop_assert!(d.norm_squared() <= d.dot(&(&z1 - &z2)) + 1e-12);
        prop_assert!(rho.in_domain(&p1));
    }

    #[test]
    fn prox_minimises_the_model(rho in prox_fns(), z in vecs(3), tau in 0.01f64..3.0, dirs in prop::collection::vec(vecs(3), 6)) {
        let p = rho.prox(&z, tau).unwrap();
        let model = |x: &DVector<f64>| tau * rho.value(x) + 0.5 * (x - &z).norm_squared();
        let best = model(&p);
        for d in &dirs {
            for s in [1e-3, 1e-1, 1.0] {
                let cand = &p + d * s;
                prop_assert!(model(&cand) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn l1_ball_prox_matches_grid_search(z in -6.0f64..6.0, tau in 0.0f64..2.0, lambda in 0.0f64..2.0, radius in 0.1f64..3.0) {
        let rho = ProxFn::L1PlusBall { lambda, radius };
        let p = rho.prox(&DVector::from_element(1, z), tau).unwrap()[0];
        let steps = 20_000;
        let h = 2.0 * radius / steps as f64;
        let (mut arg, mut best) = (0.0, f64::INFINITY);
        for s in 0..=steps {
            let x = -radius + h * s as f64;
            let val = tau * lambda * x.abs() + 0.5 * (x - z).powi(2);
            if val < best {
                best = val;
                arg = x;
            }
        }
        prop_assert!((p - arg).abs() <= h, "prox {} grid {}", p, arg);
    }
}

#[test]
fn zero_step_is_identity_on_the_domain() {
    let x = DVector::from_vec(vec![0.3, -0.4]);
    for rho in [ProxFn::Zero, ProxFn::L1 { lambda: 2.0 }, ProxFn::IndicatorBall { radius: 1.0 }] {
        assert_eq!(rho.prox(&x, 0.0).unwrap(), x);
    }
    assert!(ProxFn::L1 { lambda: 1.0 }.prox(&x, -1.0).is_err());
}
