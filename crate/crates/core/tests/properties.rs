mod common;

use std::sync::Arc;

use approx::assert_relative_eq;
use mpc_appset::appset::{app_cost, chi2_quantile, contains, perturbation_hessian, AppCostEvaluator, Ellipsoid};
use mpc_appset::model::{
    eval_matrices, matrix_hessian, matrix_jacobian, simulate_open_loop, AffineModel, Dims, FnModel, NoiseSpec,
    ParameterVector, ParametrizedModel, StateSpace,
};
use mpc_appset::mpc::{
    condense_matrices, solve_inequality_qp, solve_kkt, KktSystem, LoopSetup, MpcConfig, QpMode, Reference,
    SimulationCounter, StateEstimator,
};
use mpc_appset::scenario::{fd_hessian, sample_scenarios, FdOptions};
use mpc_appset::sensitivity::propagate_closed_loop;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// A 2-state model with trigonometric and polynomial entries in 3 parameters.
fn nonlinear_model() -> FnModel {
    let dims = Dims { n_x: 2, n_u: 1, n_y: 1 };
    let eval = |t: &DVector<f64>| StateSpace {
        a: DMatrix::from_row_slice(2, 2, &[t[0].sin(), t[0] * t[1], 0.1, t[2] * t[2]]),
        b: DMatrix::from_row_slice(2, 1, &[1.0, t[1].exp()]),
        c: DMatrix::from_row_slice(1, 2, &[t[2], t[0] * t[2]]),
    };
    let jac = |t: &DVector<f64>, i: usize| {
        let z = |r, c| DMatrix::zeros(r, c);
        let (mut a, mut b, mut c) = (z(2, 2), z(2, 1), z(1, 2));
        match i {
            0 => {
                a[(0, 0)] = t[0].cos();
                a[(0, 1)] = t[1];
                c[(0, 1)] = t[2];
            }
            1 => {
                a[(0, 1)] = t[0];
                b[(1, 0)] = t[1].exp();
            }
            _ => {
                a[(1, 1)] = 2.0 * t[2];
                c[(0, 0)] = 1.0;
                c[(0, 1)] = t[0];
            }
        }
        StateSpace { a, b, c }
    };
    let hess = |t: &DVector<f64>, i: usize, j: usize| {
        let z = |r, c| DMatrix::zeros(r, c);
        let (mut a, mut b, mut c) = (z(2, 2), z(2, 1), z(1, 2));
        match (i.min(j), i.max(j)) {
            (0, 0) => a[(0, 0)] = -t[0].sin(),
            (0, 1) => a[(0, 1)] = 1.0,
            (0, 2) => c[(0, 1)] = 1.0,
            (1, 1) => b[(1, 0)] = t[1].exp(),
            (2, 2) => a[(1, 1)] = 2.0,
            _ => {}
        }
        StateSpace { a, b, c }
    };
    FnModel::new(dims, 3, eval, jac, hess)
}

fn max_diff(x: &StateSpace, y: &StateSpace) -> f64 {
    (&x.a - &y.a).amax().max((&x.b - &y.b).amax()).max((&x.c - &y.c).amax())
}

fn scale(x: &StateSpace) -> f64 {
    x.a.amax().max(x.b.amax()).max(x.c.amax()).max(1.0)
}

fn central(model: &dyn ParametrizedModel, theta: &ParameterVector, i: usize, h: f64) -> StateSpace {
    let p = eval_matrices(model, &theta.perturbed(i, h).unwrap()).unwrap();
    let m = eval_matrices(model, &theta.perturbed(i, -h).unwrap()).unwrap();
    StateSpace {
        a: (p.a - m.a) / (2.0 * h),
        b: (p.b - m.b) / (2.0 * h),
        c: (p.c - m.c) / (2.0 * h),
    }
}

fn jac_central(model: &dyn ParametrizedModel, theta: &ParameterVector, i: usize, j: usize, h: f64) -> StateSpace {
    let p = matrix_jacobian(model, &theta.perturbed(j, h).unwrap(), i).unwrap();
    let m = matrix_jacobian(model, &theta.perturbed(j, -h).unwrap(), i).unwrap();
    StateSpace {
        a: (p.a - m.a) / (2.0 * h),
        b: (p.b - m.b) / (2.0 * h),
        c: (p.c - m.c) / (2.0 * h),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn model_derivatives_match_finite_differences(t0 in -1.0..1.0f64, t1 in -1.0..1.0f64, t2 in -1.0..1.0f64) {
        let model = nonlinear_model();
        let theta = ParameterVector::new(vec![t0, t1, t2]).unwrap();
        for i in 0..3 {
            let d = matrix_jacobian(&model, &theta, i).unwrap();
            let fd = central(&model, &theta, i, 1e-6);
            prop_assert!(max_diff(&d, &fd) <= 1e-6 * scale(&d));
            for j in 0..3 {
                let h = matrix_hessian(&model, &theta, i, j).unwrap();
                let h_t = matrix_hessian(&model, &theta, j, i).unwrap();
                prop_assert_eq!(max_diff(&h, &h_t), 0.0);
                let fd = jac_central(&model, &theta, i, j, 1e-6);
                prop_assert!(max_diff(&h, &fd) <= 1e-6 * scale(&h));
            }
        }
    }

    #[test]
    fn affine_models_have_constant_jacobians(t0 in -2.0..2.0f64, t1 in -2.0..2.0f64) {
        let dims = Dims { n_x: 2, n_u: 1, n_y: 1 };
        let term = |k: f64| StateSpace {
            a: DMatrix::from_element(2, 2, k),
            b: DMatrix::from_element(2, 1, -k),
            c: DMatrix::from_element(1, 2, 2.0 * k),
        };
        let model = AffineModel::new(StateSpace::zeros(dims), vec![term(1.0), term(0.5)]).unwrap();
        let a = ParameterVector::new(vec![t0, t1]).unwrap();
        let b = ParameterVector::new(vec![0.0, 0.0]).unwrap();
        for i in 0..2 {
            prop_assert_eq!(matrix_jacobian(&model, &a, i).unwrap(), matrix_jacobian(&model, &b, i).unwrap());
            for j in 0..2 {
                prop_assert!(matrix_hessian(&model, &a, i, j).unwrap().is_zero());
            }
        }
    }

    #[test]
    fn kkt_matches_qp_on_random_example1_steps(x in -3.0..3.0f64, u_prev in -1.0..1.0f64, t in 1usize..80) {
        let model = example1();
        let theta = ParameterVector::new(vec![0.6, 0.9]).unwrap();
        let ss = eval_matrices(&model, &theta).unwrap();
        // keep y(1) = 0.6x within its bound
        let qp = condense_matrices(&ss, &config(), &DVector::from_element(1, x), &DVector::from_element(1, u_prev), t).unwrap();
        let sol = solve_inequality_qp(&qp).unwrap();
        let kkt = KktSystem::from_active_set(&qp, &sol.active).unwrap();
        let k = solve_kkt(&kkt).unwrap();
        prop_assert!((&k.x - &sol.x).amax() <= 1e-8);
        prop_assert!(sol.ineq_multipliers.iter().all(|m| *m >= -1e-8));
        prop_assert!(qp.slack(&sol.x).iter().all(|s| *s >= -1e-8));
    }

    #[test]
    fn fd_hessian_is_exact_on_quadratics(d0 in 0.1..5.0f64, d1 in 0.1..5.0f64, off in -1.0..1.0f64,
                                        h in 1e-4..1e-2f64, c0 in -1.0..1.0f64, c1 in -1.0..1.0f64) {
        let m = DMatrix::from_row_slice(2, 2, &[d0, off, off, d1]);
        let f = |t: &ParameterVector| Ok(t.as_vector().dot(&(&m * t.as_vector())));
        let theta = ParameterVector::new(vec![c0, c1]).unwrap();
        let r = fd_hessian(f, &theta, &FdOptions { step: Some(h), richardson: false }).unwrap();
        let expect = &m * 2.0;
        // rounding in the stencil scales like ε·f/h²
        let f_scale = 1.0 + theta.as_vector().norm_squared() * expect.amax();
        prop_assert!((&r.hessian - &expect).amax() <= 1e-8 * expect.amax() + 1e-15 * f_scale / (h * h));
    }
}

fn example1() -> AffineModel {
    let dims = Dims { n_x: 1, n_u: 1, n_y: 1 };
    let base = StateSpace {
        b: DMatrix::from_element(1, 1, 1.0),
        ..StateSpace::zeros(dims)
    };
    let mut c_term = StateSpace::zeros(dims);
    c_term.c[(0, 0)] = 1.0;
    let mut a_term = StateSpace::zeros(dims);
    a_term.a[(0, 0)] = 1.0;
    AffineModel::new(base, vec![c_term, a_term]).unwrap()
}

fn config() -> MpcConfig {
    MpcConfig {
        horizon_u: 5,
        horizon_y: 5,
        q: DMatrix::from_element(1, 1, 10.0),
        r: DMatrix::from_element(1, 1, 1.0),
        u_min: DVector::from_element(1, -1.0),
        u_max: DVector::from_element(1, 1.0),
        y_min: DVector::from_element(1, -2.0),
        y_max: DVector::from_element(1, 2.0),
        reference: Reference::SquareWave {
            amplitude: DVector::from_element(1, 1.0),
            period: 40,
        },
    }
}

#[test]
fn chi2_matches_statrs() {
    for n in 1..=12 {
        let dist = ChiSquared::new(n as f64).unwrap();
        for a in [0.01, 0.1, 0.5, 0.9, 0.95, 0.99] {
            let q = chi2_quantile(a, n).unwrap();
            assert_relative_eq!(dist.cdf(q), a, epsilon = 1e-9);
            assert_relative_eq!(q, dist.inverse_cdf(a), max_relative = 1e-6);
        }
    }
    assert!((chi2_quantile(0.95, 2).unwrap() - 5.991464547).abs() < 1e-8);
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.05
}

#[test]
fn containment_agrees_with_boundary_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let center = ParameterVector::new(vec![0.6, 0.9]).unwrap();
    let mut nested = 0;
    for _ in 0..200 {
        let (outer, inner) = common::concentric_pair(&mut rng, &center);
        let exact = contains(&outer, &inner).unwrap();
        assert_eq!(exact, common::boundary_contained(&outer, &inner, 10_000));
        nested += exact as usize;
    }
    assert!(nested > 20 && nested < 180, "{nested} of 200 nested");
}

#[test]
fn containment_is_transitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let center = ParameterVector::new(vec![0.0, 0.0, 0.0]).unwrap();
    let mut chains = 0;
    for _ in 0..500 {
        let p = random_spd(&mut rng, 3);
        let e: Vec<Ellipsoid> = (0..3)
            .map(|_| {
                let shape = &p * rng.random_range(0.5..2.0) + random_spd(&mut rng, 3) * 0.05;
                Ellipsoid::new(center.clone(), shape, rng.random_range(0.5..1.5)).unwrap()
            })
            .collect();
        if contains(&e[0], &e[1]).unwrap() && contains(&e[1], &e[2]).unwrap() {
            chains += 1;
            assert!(contains(&e[0], &e[2]).unwrap());
        }
    }
    assert!(chains > 10, "only {chains} chains exercised");
}

#[test]
fn open_loop_matches_hand_recursion() {
    let model = nonlinear_model();
    let theta = ParameterVector::new(vec![0.3, -0.2, 0.8]).unwrap();
    let ss = eval_matrices(&model, &theta).unwrap();
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let u: Vec<DVector<f64>> = [0.4, -1.0, 0.25].iter().map(|v| DVector::from_element(1, *v)).collect();
    let y = simulate_open_loop(&model, &theta, &x0, &u, &NoiseSpec::none()).unwrap();
    let x1 = &ss.a * &x0 + &ss.b * &u[0];
    let x2 = &ss.a * &x1 + &ss.b * &u[1];
    assert_eq!(y, vec![&ss.c * &x0, &ss.c * &x1, &ss.c * &x2]);
}

#[test]
fn condensed_cost_matches_direct_sum() {
    let model = example1();
    let theta = ParameterVector::new(vec![0.6, 0.9]).unwrap();
    let ss = eval_matrices(&model, &theta).unwrap();
    let cfg = config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (x0, u_prev, t) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(1..60));
        let qp = condense_matrices(&ss, &cfg, &DVector::from_element(1, x0), &DVector::from_element(1, u_prev), t).unwrap();
        let sol = solve_inequality_qp(&qp).unwrap();
        // roll the model forward with the optimal inputs and sum the stage costs
        let n = cfg.horizon();
        let u: Vec<f64> = (1..=n).map(|j| qp.layout.input(&sol.x, j)[0]).collect();
        let mut x = x0;
        let mut direct = 0.0;
        for j in 1..=n + 1 {
            let e = theta.as_slice()[0] * x - cfg.reference.at(t + j - 1)[0];
            direct += 10.0 * e * e;
            if j <= n {
                let du = u[j - 1] - if j == 1 { u_prev } else { u[j - 2] };
                direct += du * du;
                x = theta.as_slice()[1] * x + u[j - 1];
            }
        }
        assert_relative_eq!(qp.cost(&sol.x), direct, max_relative = 1e-9, epsilon = 1e-12);
    }
}

#[test]
fn vapp_vanishes_at_the_estimate_and_hessian_is_psd() {
    for exp in [common::example1(), common::example2()] {
        assert_eq!(app_cost(&exp.theta_hat, &exp.theta_hat, &exp.setup, exp.cost.m).unwrap(), 0.0);
        let h = perturbation_hessian(&exp.setup, &exp.theta_hat, exp.cost.m, 1).unwrap().hessian;
        assert_eq!(h, h.transpose());
        let min = h.clone().symmetric_eigenvalues().min();
        assert!(min >= -1e-10 * h.norm(), "min eigenvalue {min}");
    }
}

#[test]
fn quadratic_model_is_faithful_for_small_steps() {
    let exp = common::example1();
    let h = perturbation_hessian(&exp.setup, &exp.theta_hat, exp.cost.m, 1).unwrap().hessian;
    let ev = AppCostEvaluator::new(&exp.setup, &exp.theta_hat, exp.cost.m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let delta = DVector::from_vec(vec![a.cos(), a.sin()]) * 1e-4;
        let quad = 0.5 * delta.dot(&(&h * &delta));
        let v = ev.cost(&exp.theta_hat.offset(&delta, 1.0).unwrap()).unwrap();
        assert!((v - quad).abs() <= 0.1 * quad, "V = {v}, quadratic = {quad}");
    }
}

#[test]
fn accepted_fraction_is_stable_across_seeds() {
    let exp = common::example1();
    let (bounds, n_k, _) = exp.scenario.clone().unwrap();
    let ev = AppCostEvaluator::new(&exp.setup, &exp.theta_hat, exp.cost.m).unwrap();
    let gamma = exp.cost.gamma;
    let fractions: Vec<f64> = (0..10)
        .map(|seed| {
            let set = sample_scenarios(&bounds, n_k, seed, &ev).unwrap();
            set.accepted_count(gamma) as f64 / n_k as f64
        })
        .collect();
    let spread = fractions.iter().cloned().fold(f64::MIN, f64::max) - fractions.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.10, "accepted fractions {fractions:?}");
}

#[test]
fn general_model_sensitivities_match_frozen_fd() {
    let model: Arc<dyn ParametrizedModel> = Arc::new(nonlinear_model());
    let cfg = MpcConfig {
        u_min: DVector::from_element(1, -0.5),
        u_max: DVector::from_element(1, 0.5),
        y_min: DVector::from_element(1, -5.0),
        y_max: DVector::from_element(1, 5.0),
        ..config()
    };
    let setup = LoopSetup {
        model,
        config: cfg,
        estimator: StateEstimator::Direct,
        x0: DVector::zeros(2),
        horizon: 40,
        counter: SimulationCounter::default(),
    };
    let theta = ParameterVector::new(vec![0.5, -0.3, 0.7]).unwrap();
    let traj = setup.simulate(&theta, &theta, &NoiseSpec::none(), true, QpMode::Solve).unwrap();
    let b = propagate_closed_loop(&traj, &setup, &theta, 1).unwrap();
    let sets = traj.active_sets();
    let h = 1e-6;
    for i in 0..3 {
        let run = |s: f64| {
            setup
                .simulate(&theta.perturbed(i, s * h).unwrap(), &theta, &NoiseSpec::none(), false, QpMode::Frozen(&sets))
                .unwrap()
                .outputs()
        };
        let (p, m) = (run(1.0), run(-1.0));
        let scale = b.dy.iter().map(|d| d.column(i).amax()).fold(0.0, f64::max);
        for t in 0..traj.len() {
            let fd = (&p[t] - &m[t]) / (2.0 * h);
            assert!((b.dy[t].column(i) - fd).amax() <= 1e-4 * scale.max(1e-8), "param {i} t {}", t + 1);
        }
    }
}
