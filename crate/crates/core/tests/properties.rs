use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;
use tvcbf_core::field::NegNorm;
use tvcbf_core::trajectory::time_grid;
use tvcbf_core::*;

fn vec_in(n: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn qp_solution_is_feasible_and_beats_feasible_samples(
        u_ref in vec_in(2, 3.0),
        rows in prop::collection::vec((vec_in(2, 1.0), 0.05f64..0.5), 0..=3),
        anchor in vec_in(2, 0.7),
        probes in prop::collection::vec(vec_in(2, 1.0), 64),
    ) {
        let bx = InputBox::symmetric(1.0, 2);
        let anchor = DVector::from_vec(anchor);
        let cons: Vec<LinearConstraint> = rows
            .into_iter()
            .map(|(a, gap)| {
                let a = DVector::from_vec(a);
                let b0 = a.dot(&anchor) - gap;
                LinearConstraint::new(a, b0).unwrap()
            })
            .collect();
        let u_ref = DVector::from_vec(u_ref);
        let res = solve_box_qp(&u_ref, &bx, &cons).unwrap();
        prop_assert!(res.status.is_feasible());
        prop_assert!(bx.contains(&res.u));
        prop_assert!(cons.iter().all(|c| c.slack(&res.u) >= -1e-9));
        prop_assert!(kkt_residual(&res.u, &u_ref, &bx, &cons) <= 1e-6);
        let best = (&res.u - &u_ref).norm_squared();
        for p in probes {
            let p = DVector::from_vec(p);
            if cons.iter().all(|c| c.slack(&p) >= 0.0) {
                prop_assert!(best <= (&p - &u_ref).norm_squared() + 1e-9);
            }
        }
    }

    #[test]
    fn sigmoid_is_odd_bounded_and_increasing(xi in -20.0f64..20.0, d in 1e-6f64..1.0, c1 in 0.1f64..10.0, c2 in 0.1f64..10.0) {
        let s = |x: f64| sigmoid_eval(x, c1, c2).unwrap();
        prop_assert!((s(xi) + s(-xi)).abs() <= 1e-12 * c1);
        prop_assert!(s(xi).abs() <= c1);
        prop_assert!(s(xi + d) >= s(xi));
        prop_assert_eq!(s(0.0), 0.0);
    }

    #[test]
    fn translated_barrier_matches_hand_formula(
        x in vec_in(2, 3.0),
        waypoints in prop::collection::vec(vec_in(2, 2.0), 2..5),
        t in 0.0f64..20.0,
        lambda in 0.0f64..0.25,
    ) {
        let wps: Vec<DVector<f64>> = waypoints.into_iter().map(DVector::from_vec).collect();
        let p = generate_waypoint_path(&wps, 0.75, None, 0.0).unwrap();
        let alpha = ExtendedKeFn::sigmoid(1.0, 8.0).unwrap();
        let base = ShiftableCbf::new(Arc::new(NegNorm::new(2)), alpha.clone(), 0.25, Domain::cube(1.0, 2)).unwrap();
        let b = TimeVaryingCbf::new("b", base, DiffeoFamily::TranslateFull { n: 2 }, p.clone(), OffsetTrajectory::constant(lambda), alpha)
            .unwrap();
        let x = DVector::from_vec(x);
        let expected = -(&x - p.eval(t)).norm() + lambda;
        prop_assert!((eval_b(&b, t, &x) - expected).abs() <= 1e-12);
    }

    #[test]
    fn rescaled_paths_respect_the_bound(
        waypoints in prop::collection::vec(vec_in(2, 3.0), 2..6),
        speed in 0.1f64..5.0,
        bound in 0.1f64..2.0,
    ) {
        let mut knots = vec![(0.0, DVector::from_vec(waypoints[0].clone()))];
        for w in waypoints.windows(2) {
            let d = (DVector::from_vec(w[1].clone()) - DVector::from_vec(w[0].clone())).norm().max(1e-3);
            let t = knots.last().unwrap().0 + d / speed;
            knots.push((t, DVector::from_vec(w[1].clone())));
        }
        let end = knots.last().unwrap().0;
        let p = ParamTrajectory::piecewise_linear(knots.clone()).unwrap();
        let horizon = end * (speed / bound).max(1.0) * 1.5 + 1.0;
        let grid = time_grid(0.0, horizon, 2001);
        let (_, q) = rescale_time(&p, bound, &grid).unwrap();
        for w in grid.windows(2) {
            let rate = (q.eval(w[1]) - q.eval(w[0])).norm() / (w[1] - w[0]);
            prop_assert!(rate <= bound * (1.0 + 1e-9) + 1e-12, "rate {} > {}", rate, bound);
        }
        prop_assert!((q.eval(horizon) - &knots.last().unwrap().1).norm() <= 1e-9);
    }

    #[test]
    fn rk4_is_exact_for_constant_single_integrator_input(x in vec_in(3, 5.0), u in vec_in(3, 1.0), dt in 1e-4f64..0.5) {
        let model = DynamicsModel::single_integrator(3);
        let (x, u) = (DVector::from_vec(x), DVector::from_vec(u));
        let next = step_rk4(&model, &x, &u, dt).unwrap();
        prop_assert!((next - (&x + &u * dt)).amax() <= 1e-12);
    }

    #[test]
    fn increasing_tables_are_class_ke(steps in prop::collection::vec(0.01f64..1.0, 2..8), slopes in prop::collection::vec(0.1f64..3.0, 2..8)) {
        let mut knots = vec![(0.0, 0.0)];
        for (dx, k) in steps.iter().zip(&slopes) {
            let (x, y) = *knots.last().unwrap();
            knots.push((x + dx, y + k * dx));
        }
        let (x1, y1) = knots[1];
        knots.insert(0, (-x1, -y1));
        let f = ExtendedKeFn::tabulated(knots).unwrap();
        let (lo, hi) = f.domain_hint();
        let grid = tvcbf_core::comparison::grid_through_zero(lo, hi, 501);
        prop_assert!(verify_class_ke(&f, &grid).unwrap().pass);
    }
}

#[test]
fn decreasing_table_is_rejected() {
    let f = ExtendedKeFn::tabulated(vec![(-1.0, -1.0), (0.0, 0.0), (1.0, 2.0), (2.0, 1.5)]);
    let rejected = match f {
        Err(_) => true,
        Ok(f) => !verify_class_ke(&f, &tvcbf_core::comparison::grid_through_zero(-1.0, 2.0, 301)).unwrap().pass,
    };
    assert!(rejected);
}
