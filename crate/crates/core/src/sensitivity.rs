//! Perturbation analysis of one nominal closed-loop run.
//!
//! With the active set of every step frozen, each step's optimizer is the
//! solution of `Ψ(θ)[X; λ] = Λ(θ)`. Differentiating that identity gives
//! `Ψ ∂[X; λ] = ∂Λ − ∂Ψ [X; λ]`, solved with the factorization already
//! computed for the nominal step. The input sensitivities are chained
//! through the plant, which stays at θ̂:
//! `∂x(t+1) = A(θ̂)∂x(t) + B(θ̂)∂u(t)`, `∂y(t) = C(θ̂)∂x(t)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{matrix_hessian, matrix_jacobian, eval_matrices, ParameterVector, ParametrizedModel, StateSpace};
use crate::mpc::{
    CondensedQp, KktFactor, KktSolution, KktSystem, LoopSetup, QpDerivative, StateEstimator,
    StepKkt, Trajectory,
};

/// Weak-activity threshold for the degeneracy flag.
pub const DEGENERACY_TOL: f64 = 1e-6;

/// Sensitivities of one step's KKT solution.
#[derive(Clone, Debug)]
pub struct StepSensitivity {
    /// `∂X/∂θᵢ`, one per parameter.
    pub dx: Vec<DVector<f64>>,
    /// `∂λ/∂θᵢ`.
    pub dlambda: Vec<DVector<f64>>,
    /// `∂²X/∂θᵢ∂θⱼ`, indexed `[i][j]`, when second order is requested.
    pub d2x: Option<Vec<Vec<DVector<f64>>>>,
    /// Largest relative residual over the derivative systems of the step.
    pub residual: f64,
    pub degenerate: bool,
}

/// Per-step output/input/state sensitivities of the closed loop.
#[derive(Clone, Debug)]
pub struct SensitivityBundle {
    pub n_params: usize,
    /// `∂y(t)/∂θ`, `n_y × n`, t = 1..=T.
    pub dy: Vec<DMatrix<f64>>,
    pub du: Vec<DMatrix<f64>>,
    pub dx: Vec<DMatrix<f64>>,
    /// `∂²y(t)/∂θᵢ∂θⱼ` stored as `n_y × n²`, column `i·n + j`.
    pub d2y: Option<Vec<DMatrix<f64>>>,
    pub steps: Vec<StepSensitivity>,
    pub warnings: Vec<String>,
}

impl SensitivityBundle {
    pub fn len(&self) -> usize {
        self.dy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dy.is_empty()
    }

    pub fn degenerate_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(k, s)| s.degenerate.then_some(k + 1))
            .collect()
    }

    /// `‖∂X/∂θᵢ‖` per step and parameter.
    pub fn dx_norms(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| s.dx.iter().map(|v| v.norm()).collect())
            .collect()
    }

    /// Taylor reconstruction of the outputs at `θ̂ + δ`:
    /// `y + ∂y δ (+ ½ δᵀ∂²y δ when available)`.
    pub fn predict_outputs(&self, nominal: &[DVector<f64>], delta: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if delta.len() != self.n_params {
            return Err(Error::ParameterShape {
                expected: self.n_params,
                got: delta.len(),
            });
        }
        if nominal.len() != self.len() {
            return Err(Error::dim("nominal output sequence length differs from the bundle"));
        }
        let n = self.n_params;
        Ok(nominal
            .iter()
            .enumerate()
            .map(|(k, y)| {
                let mut out = y + &self.dy[k] * delta;
                if let Some(d2) = &self.d2y {
                    for i in 0..n {
                        for j in 0..n {
                            out += d2[k].column(i * n + j) * (0.5 * delta[i] * delta[j]);
                        }
                    }
                }
                out
            })
            .collect())
    }
}

/// Data derivative of one step's QP with respect to θᵢ.
pub fn qp_data_derivatives(
    controller_model: &dyn ParametrizedModel,
    theta_hat: &ParameterVector,
    qp: &CondensedQp,
    dx_now: &DVector<f64>,
    du_prev: &DVector<f64>,
    i: usize,
) -> Result<QpDerivative> {
    let d = matrix_jacobian(controller_model, theta_hat, i)?;
    check_direction(qp, &d, dx_now, du_prev)?;
    Ok(qp.layout.derivative(&d, dx_now, du_prev))
}

fn check_direction(qp: &CondensedQp, d: &StateSpace, dx_now: &DVector<f64>, du_prev: &DVector<f64>) -> Result<()> {
    if d.dims() != qp.layout.dims {
        return Err(Error::dim("derivative matrices do not match the QP dimensions"));
    }
    if dx_now.len() != qp.layout.dims.n_x || du_prev.len() != qp.layout.dims.n_u {
        return Err(Error::dim("state/input derivative has the wrong length"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct KktSensitivity {
    pub dx: DVector<f64>,
    pub dlambda: DVector<f64>,
    /// `‖Ψ∂z − rhs‖ / (1 + ‖rhs‖)`.
    pub residual: f64,
}

/// Solves `Ψ ∂z = ∂Λ − ∂Ψ z` for the derivative of the KKT solution.
pub fn kkt_sensitivity(
    kkt: &KktSystem,
    solution: &KktSolution,
    dpsi: &DMatrix<f64>,
    dlambda: &DVector<f64>,
) -> Result<KktSensitivity> {
    let z = solution.stacked();
    let nominal = (&kkt.psi * &z - &kkt.lambda).norm();
    if nominal > 1e-8 * (1.0 + kkt.lambda.norm()) {
        return Err(Error::SingularSystem { residual: nominal });
    }
    let factor = kkt.factor();
    let s = sensitivity_solve(&factor, kkt.x_dim, &(dlambda - dpsi * &z));
    if s.residual > 1e-8 {
        return Err(Error::SingularSystem { residual: s.residual });
    }
    Ok(s)
}

fn sensitivity_solve(factor: &KktFactor, x_dim: usize, rhs: &DVector<f64>) -> KktSensitivity {
    let (dz, abs) = factor.solve_unchecked(rhs);
    KktSensitivity {
        dx: dz.rows(0, x_dim).into_owned(),
        dlambda: dz.rows(x_dim, dz.len() - x_dim).into_owned(),
        residual: abs / (1.0 + rhs.norm()),
    }
}

/// True when the frozen-active-set derivative is one-sided at this step:
/// an active row has a near-zero multiplier or an inactive row is within
/// [`DEGENERACY_TOL`] of its bound.
pub fn is_degenerate(step: &StepKkt) -> bool {
    let ne = step.qp.ccal.nrows();
    let weak_multiplier = (0..step.rows.len()).any(|k| step.solution.multipliers[ne + k].abs() < DEGENERACY_TOL);
    let slack = step.qp.slack(&step.solution.x);
    let near_bound = (0..slack.len())
        .filter(|r| !step.rows.contains(r))
        .any(|r| slack[r] < DEGENERACY_TOL);
    weak_multiplier || near_bound
}

/// Differentiates a recorded closed loop run at `θ̂` (controller and plant
/// both at `θ̂`) with respect to the controller parameters.
pub fn propagate_closed_loop(
    trajectory: &Trajectory,
    setup: &LoopSetup,
    theta_hat: &ParameterVector,
    order: usize,
) -> Result<SensitivityBundle> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidArgument(format!("sensitivity order must be 1 or 2, got {order}")));
    }
    if trajectory.estimator != setup.estimator {
        return Err(Error::InvalidArgument("trajectory was run with a different estimator".into()));
    }
    let second = order == 2;
    let n = setup.n_params();
    let base = setup.model.as_ref();
    let ctrl = setup.controller_model();
    let plant = eval_matrices(base, theta_hat)?;
    let dims = base.dims();
    let (nx, nu, ny) = (dims.n_x, dims.n_u, dims.n_y);

    let d_base: Vec<StateSpace> = (0..n).map(|i| matrix_jacobian(base, theta_hat, i)).collect::<Result<_>>()?;
    let d_ctrl: Vec<StateSpace> = (0..n).map(|i| matrix_jacobian(ctrl.as_ref(), theta_hat, i)).collect::<Result<_>>()?;
    let (dd_base, dd_ctrl) = if second {
        let mut b = Vec::with_capacity(n * n);
        let mut c = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                b.push(matrix_hessian(base, theta_hat, i, j)?);
                c.push(matrix_hessian(ctrl.as_ref(), theta_hat, i, j)?);
            }
        }
        (b, c)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut dxp = DMatrix::<f64>::zeros(nx, n);
    let mut dxhat = DMatrix::<f64>::zeros(nx, n);
    let mut dup = DMatrix::<f64>::zeros(nu, n);
    let mut d2xp = vec![DVector::<f64>::zeros(nx); if second { n * n } else { 0 }];
    let mut d2xhat = d2xp.clone();
    let mut d2up = vec![DVector::<f64>::zeros(nu); if second { n * n } else { 0 }];

    let mut bundle = SensitivityBundle {
        n_params: n,
        dy: Vec::with_capacity(trajectory.len()),
        du: Vec::with_capacity(trajectory.len()),
        dx: Vec::with_capacity(trajectory.len()),
        d2y: second.then(Vec::new),
        steps: Vec::with_capacity(trajectory.len()),
        warnings: Vec::new(),
    };

    for rec in &trajectory.steps {
        let t = rec.t;
        let kk = rec.kkt.as_ref().ok_or_else(|| {
            Error::InvalidArgument("trajectory was recorded without KKT data".into())
        })?;
        let qp = &kk.qp;
        let z = kk.solution.stacked();
        let kkt = KktSystem::from_active_set(qp, &rec.active).map_err(|e| e.at_step(t))?;
        let factor = kkt.factor();
        let xd = qp.x_dim();
        let ucol = qp.layout.ucol(1);

        bundle.dy.push(&plant.c * &dxp);
        bundle.dx.push(dxp.clone());
        if let Some(d2y) = bundle.d2y.as_mut() {
            let mut m = DMatrix::zeros(ny, n * n);
            for (k, v) in d2xp.iter().enumerate() {
                m.set_column(k, &(&plant.c * v));
            }
            d2y.push(m);
        }

        // ∂x*(t)
        let dxs: Vec<DVector<f64>> = (0..n)
            .map(|i| match setup.estimator {
                StateEstimator::Direct => dxp.column(i).into_owned(),
                StateEstimator::OutputDisturbance => {
                    let dd = &plant.c * dxp.column(i) - &d_base[i].c * &rec.x_hat - &plant.c * dxhat.column(i);
                    stack(&dxhat.column(i).into_owned(), &dd)
                }
            })
            .collect();

        let mut degenerate = is_degenerate(kk);
        let mut residual: f64 = 0.0;
        let mut dqp = Vec::with_capacity(n);
        let mut dpsi = Vec::with_capacity(n);
        let mut dz = Vec::with_capacity(n);
        let mut step = StepSensitivity {
            dx: Vec::with_capacity(n),
            dlambda: Vec::with_capacity(n),
            d2x: None,
            residual: 0.0,
            degenerate: false,
        };
        let mut du = DMatrix::zeros(nu, n);
        for i in 0..n {
            let d = qp.layout.derivative(&d_ctrl[i], &dxs[i], &dup.column(i).into_owned());
            let (dp, dl) = KktSystem::derivative(qp, &kk.rows, &d);
            let s = sensitivity_solve(&factor, xd, &(dl - &dp * &z));
            residual = residual.max(s.residual);
            du.set_column(i, &s.dx.rows(ucol, nu));
            dz.push(stack(&s.dx, &s.dlambda));
            step.dx.push(s.dx);
            step.dlambda.push(s.dlambda);
            dqp.push(d);
            dpsi.push(dp);
        }

        let mut d2u = Vec::new();
        if second {
            let m = kk.rows.len() + qp.ccal.nrows();
            let mut table = vec![Vec::with_capacity(n); n];
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    let d2xs = match setup.estimator {
                        StateEstimator::Direct => d2xp[k].clone(),
                        StateEstimator::OutputDisturbance => {
                            let dd = &plant.c * &d2xp[k]
                                - (&dd_base[k].c * &rec.x_hat
                                    + &d_base[i].c * dxhat.column(j)
                                    + &d_base[j].c * dxhat.column(i)
                                    + &plant.c * &d2xhat[k]);
                            stack(&d2xhat[k], &dd)
                        }
                    };
                    let lin = qp.layout.derivative(&dd_ctrl[k], &d2xs, &d2up[k]);
                    let (p2, l2) = KktSystem::derivative(qp, &kk.rows, &lin);
                    let (pc, lc) = KktSystem::cross_terms(qp, m, &dqp[i], &dqp[j]);
                    let rhs = l2 + lc - (p2 + pc) * &z - &dpsi[i] * &dz[j] - &dpsi[j] * &dz[i];
                    let s = sensitivity_solve(&factor, xd, &rhs);
                    residual = residual.max(s.residual);
                    d2u.push(s.dx.rows(ucol, nu).into_owned());
                    table[i].push(s.dx);
                }
            }
            step.d2x = Some(table);
        }

        if residual > 1e-8 {
            degenerate = true;
            bundle.warnings.push(format!(
                "t={t}: derivative KKT system inconsistent (relative residual {residual:.2e})"
            ));
        }
        step.residual = residual;
        step.degenerate = degenerate;
        bundle.steps.push(step);
        bundle.du.push(du.clone());

        // advance the recursions to t+1
        let u = &rec.u;
        if setup.estimator == StateEstimator::OutputDisturbance {
            let mut next = DMatrix::zeros(nx, n);
            for (i, d) in d_base.iter().enumerate() {
                let col = &d.a * &rec.x_hat
                    + &plant.a * dxhat.column(i)
                    + &d.b * u
                    + &plant.b * du.column(i);
                next.set_column(i, &col);
            }
            if second {
                let mut next2 = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        let k = i * n + j;
                        next2.push(
                            &dd_base[k].a * &rec.x_hat
                                + &d_base[i].a * dxhat.column(j)
                                + &d_base[j].a * dxhat.column(i)
                                + &plant.a * &d2xhat[k]
                                + &dd_base[k].b * u
                                + &d_base[i].b * du.column(j)
                                + &d_base[j].b * du.column(i)
                                + &plant.b * &d2u[k],
                        );
                    }
                }
                d2xhat = next2;
            }
            dxhat = next;
        }
        dxp = &plant.a * &dxp + &plant.b * &du;
        if second {
            for k in 0..n * n {
                d2xp[k] = &plant.a * &d2xp[k] + &plant.b * &d2u[k];
            }
            d2up = d2u;
        }
        dup = du;
    }
    let degenerate = bundle.degenerate_steps().len();
    if degenerate > 0 {
        bundle
            .warnings
            .push(format!("{degenerate} step(s) flagged degenerate"));
    }
    Ok(bundle)
}

/// Per-step diagnostics: `t, dx_norm_1..n, residual, degenerate`.
pub fn write_diagnostics_csv<W: std::io::Write>(bundle: &SensitivityBundle, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=bundle.n_params).map(|i| format!("dx_norm_{i}")));
    header.extend(["residual", "degenerate"].map(String::from));
    w.write_record(&header)?;
    for (k, (s, norms)) in bundle.steps.iter().zip(bundle.dx_norms()).enumerate() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(norms.iter().map(|v| v.to_string()));
        row.push(s.residual.to_string());
        row.push((s.degenerate as u8).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::model::{AffineModel, Dims, NoiseSpec};
    use crate::mpc::{condense_matrices, solve_kkt, ActiveSet, MpcConfig, QpMode, Reference};
    use crate::test_support::{example1_config, example1_model, example1_setup};

    fn th(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    /// Central differences of the outputs with the controller perturbed and
    /// the active sets frozen.
    fn fd_outputs(setup: &LoopSetup, theta: &ParameterVector, sets: &[ActiveSet], h: f64) -> Vec<DMatrix<f64>> {
        let n = theta.len();
        let mut cols = Vec::new();
        for i in 0..n {
            let run = |s: f64| {
                setup
                    .simulate(&theta.perturbed(i, s * h).unwrap(), theta, &NoiseSpec::none(), false, QpMode::Frozen(sets))
                    .unwrap()
                    .outputs()
            };
            let (p, m) = (run(1.0), run(-1.0));
            cols.push(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
        }
        (0..cols[0].len())
            .map(|t| DMatrix::from_fn(cols[0][t].len(), n, |r, i| cols[i][t][r]))
            .collect()
    }

    fn nominal(setup: &LoopSetup, theta: &ParameterVector) -> Trajectory {
        setup.simulate(theta, theta, &NoiseSpec::none(), true, QpMode::Solve).unwrap()
    }

    #[test]
    fn parameter_without_effect_gives_zero_bundle() {
        let dims = Dims { n_x: 1, n_u: 1, n_y: 1 };
        let base = StateSpace {
            a: DMatrix::from_element(1, 1, 0.9),
            b: DMatrix::from_element(1, 1, 1.0),
            c: DMatrix::from_element(1, 1, 0.6),
        };
        let model = AffineModel::new(base, vec![StateSpace::zeros(dims)]).unwrap();
        let setup = LoopSetup {
            model: Arc::new(model),
            ..example1_setup()
        };
        let t = th(&[0.3]);
        let b = propagate_closed_loop(&nominal(&setup, &t), &setup, &t, 2).unwrap();
        assert!(b.dy.iter().chain(&b.du).chain(&b.dx).all(|m| m.amax() == 0.0));
        assert!(b.d2y.unwrap().iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn zero_data_derivative_gives_zero_sensitivity() {
        let ss = eval_matrices(&example1_model(), &th(&[0.6, 0.9])).unwrap();
        let qp = condense_matrices(&ss, &example1_config(), &DVector::from_element(1, 0.4), &DVector::zeros(1), 1).unwrap();
        let kkt = KktSystem::from_active_set(&qp, &ActiveSet::empty(qp.g_ineq.nrows())).unwrap();
        let sol = solve_kkt(&kkt).unwrap();
        let s = kkt_sensitivity(&kkt, &sol, &DMatrix::zeros(kkt.dim(), kkt.dim()), &DVector::zeros(kkt.dim())).unwrap();
        assert_eq!(s.dx.amax(), 0.0);
        assert_eq!(s.dlambda.amax(), 0.0);
    }

    #[test]
    fn scalar_step_matches_hand_derivative() {
        // N = 1, unconstrained: u = q c (r − c a x0) / (q c² + ρ)
        let (c, a, q, rho, r, x0) = (0.6, 0.9, 10.0, 1.0, 0.2, 0.1);
        let model = example1_model();
        let theta = th(&[c, a]);
        let ss = eval_matrices(&model, &theta).unwrap();
        let cfg = MpcConfig {
            horizon_u: 1,
            horizon_y: 1,
            reference: Reference::Constant(DVector::from_element(1, r)),
            ..example1_config()
        };
        let x_now = DVector::from_element(1, x0);
        let qp = condense_matrices(&ss, &cfg, &x_now, &DVector::zeros(1), 1).unwrap();
        let kkt = KktSystem::from_active_set(&qp, &ActiveSet::empty(6)).unwrap();
        let sol = solve_kkt(&kkt).unwrap();
        let den = q * c * c + rho;
        let du_da = -q * c * c * x0 / den;
        let du_dc = (q * (r - 2.0 * c * a * x0) * den - q * c * (r - c * a * x0) * 2.0 * q * c) / (den * den);
        for (i, expect) in [(0, du_dc), (1, du_da)] {
            let d = qp_data_derivatives(&model, &theta, &qp, &DVector::zeros(1), &DVector::zeros(1), i).unwrap();
            let (dp, dl) = KktSystem::derivative(&qp, &[], &d);
            let s = kkt_sensitivity(&kkt, &sol, &dp, &dl).unwrap();
            assert!((s.dx[qp.layout.ucol(1)] - expect).abs() < 1e-12, "param {i}");
        }
    }

    #[test]
    fn kkt_step_matches_frozen_finite_differences() {
        let model = example1_model();
        let theta = th(&[0.6, 0.9]);
        let cfg = example1_config();
        let x_now = DVector::from_element(1, -1.6);
        let u_prev = DVector::from_element(1, -0.2);
        let build = |t: &ParameterVector| {
            condense_matrices(&eval_matrices(&model, t).unwrap(), &cfg, &x_now, &u_prev, 1).unwrap()
        };
        let qp = build(&theta);
        let active = crate::mpc::solve_inequality_qp(&qp).unwrap().active;
        assert!(!active.is_empty(), "instance should have active bounds");
        let sys = crate::mpc::assemble_active_system(&qp, &active).unwrap();
        let kkt = KktSystem::new(&qp, &sys);
        let sol = solve_kkt(&kkt).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let d = qp_data_derivatives(&model, &theta, &qp, &DVector::zeros(1), &DVector::zeros(1), i).unwrap();
            let (dp, dl) = KktSystem::derivative(&qp, &sys.rows, &d);
            let s = kkt_sensitivity(&kkt, &sol, &dp, &dl).unwrap();
            let x = |sgn: f64| {
                let qp = build(&theta.perturbed(i, sgn * h).unwrap());
                solve_kkt(&KktSystem::from_active_set(&qp, &active).unwrap()).unwrap().x
            };
            let fd = (x(1.0) - x(-1.0)) / (2.0 * h);
            assert!((&s.dx - &fd).amax() <= 1e-5 * fd.amax(), "param {i}");
        }
    }

    #[test]
    fn data_derivative_matches_rebuilt_qp() {
        let model = example1_model();
        let theta = th(&[0.6, 0.9]);
        let cfg = example1_config();
        let x_now = DVector::from_element(1, 0.7);
        let build = |t: &ParameterVector| {
            condense_matrices(&eval_matrices(&model, t).unwrap(), &cfg, &x_now, &DVector::zeros(1), 4).unwrap()
        };
        let h = 1e-6;
        for i in 0..2 {
            let d = qp_data_derivatives(&model, &theta, &build(&theta), &DVector::zeros(1), &DVector::zeros(1), i).unwrap();
            let p = build(&theta.perturbed(i, h).unwrap());
            let m = build(&theta.perturbed(i, -h).unwrap());
            assert!(((&p.upsilon - &m.upsilon) / (2.0 * h) - &d.upsilon).amax() < 1e-6);
            assert!(((&p.ccal - &m.ccal) / (2.0 * h) - &d.ccal).amax() < 1e-6);
            assert!(((&p.g_ineq - &m.g_ineq) / (2.0 * h) - &d.g_ineq).amax() < 1e-6);
        }
    }

    #[test]
    fn closed_loop_outputs_match_frozen_finite_differences() {
        let mut setup = example1_setup();
        setup.horizon = 60;
        let theta = th(&[0.6, 0.9]);
        let traj = nominal(&setup, &theta);
        let b = propagate_closed_loop(&traj, &setup, &theta, 1).unwrap();
        let fd = fd_outputs(&setup, &theta, &traj.active_sets(), 1e-6);
        let num: f64 = b.dy.iter().zip(&fd).map(|(a, f)| (a - f).amax()).fold(0.0, f64::max);
        let den: f64 = fd.iter().map(|f| f.amax()).fold(0.0, f64::max);
        assert!(num <= 1e-4 * den, "{num} vs {den}");
        assert!(traj.steps.iter().any(|s| !s.active.is_empty()));
    }

    #[test]
    fn disturbance_estimator_matches_frozen_finite_differences() {
        let mut setup = crate::experiment::example2().build().unwrap().setup;
        setup.horizon = 60;
        let theta = th(&[0.85, 0.10, -0.05, 0.70, 0.30, -0.20, 0.10, 0.40]);
        let traj = nominal(&setup, &theta);
        let b = propagate_closed_loop(&traj, &setup, &theta, 1).unwrap();
        let fd = fd_outputs(&setup, &theta, &traj.active_sets(), 1e-6);
        let num: f64 = b.dy.iter().zip(&fd).map(|(a, f)| (a - f).amax()).fold(0.0, f64::max);
        let den: f64 = fd.iter().map(|f| f.amax()).fold(0.0, f64::max);
        assert!(num <= 1e-4 * den, "{num} vs {den}");
    }

    #[test]
    fn second_order_is_symmetric_and_matches_differences_of_first_order() {
        for estimator in [StateEstimator::Direct, StateEstimator::OutputDisturbance] {
            let mut setup = example1_setup();
            setup.horizon = 50;
            setup.estimator = estimator;
            let theta = th(&[0.6, 0.9]);
            let traj = nominal(&setup, &theta);
            let b = propagate_closed_loop(&traj, &setup, &theta, 2).unwrap();
            for s in &b.steps {
                let d2 = s.d2x.as_ref().unwrap();
                let scale = d2[0][1].amax().max(1e-12);
                assert!((&d2[0][1] - &d2[1][0]).amax() <= 1e-8 * scale);
            }
            // second-order output derivative vs differences of outputs
            let sets = traj.active_sets();
            let h = 1e-4;
            let y = |d0: f64, d1: f64| {
                let t = theta.offset(&DVector::from_vec(vec![d0, d1]), 1.0).unwrap();
                setup.simulate(&t, &theta, &NoiseSpec::none(), false, QpMode::Frozen(&sets)).unwrap().outputs()
            };
            let (pp, pm, mp, mm) = (y(h, h), y(h, -h), y(-h, h), y(-h, -h));
            let d2y = b.d2y.as_ref().unwrap();
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for t in 0..b.len() {
                let fd = (&pp[t] - &pm[t] - &mp[t] + &mm[t]) / (4.0 * h * h);
                worst = worst.max((d2y[t].column(1) - &fd).amax());
                scale = scale.max(fd.amax());
            }
            assert!(worst <= 1e-4 * scale.max(1e-8), "{estimator:?}: {worst} vs {scale}");
        }
    }

    #[test]
    fn taylor_reconstruction() {
        let mut setup = example1_setup();
        setup.horizon = 40;
        let theta = th(&[0.6, 0.9]);
        let traj = nominal(&setup, &theta);
        let b = propagate_closed_loop(&traj, &setup, &theta, 2).unwrap();
        let y0 = traj.outputs();
        assert_eq!(b.predict_outputs(&y0, &DVector::zeros(2)).unwrap(), y0);
        let delta = DVector::from_vec(vec![1e-3, -2e-3]);
        let sets = traj.active_sets();
        let t = theta.offset(&delta, 1.0).unwrap();
        let exact = setup.simulate(&t, &theta, &NoiseSpec::none(), false, QpMode::Frozen(&sets)).unwrap().outputs();
        let second = b.predict_outputs(&y0, &delta).unwrap();
        let first = SensitivityBundle { d2y: None, ..b.clone() }.predict_outputs(&y0, &delta).unwrap();
        let err = |p: &[DVector<f64>]| p.iter().zip(&exact).map(|(a, e)| (a - e).amax()).fold(0.0, f64::max);
        assert!(err(&second) < 0.1 * err(&first));
    }

    #[test]
    fn rejects_bad_requests() {
        let setup = example1_setup();
        let theta = th(&[0.6, 0.9]);
        let plain = setup.simulate(&theta, &theta, &NoiseSpec::none(), false, QpMode::Solve).unwrap();
        assert!(propagate_closed_loop(&plain, &setup, &theta, 1).is_err());
        let traj = nominal(&setup, &theta);
        assert!(propagate_closed_loop(&traj, &setup, &theta, 3).is_err());
    }

    #[test]
    fn diagnostics_csv_has_one_row_per_step() {
        let mut setup = example1_setup();
        setup.horizon = 10;
        let theta = th(&[0.6, 0.9]);
        let b = propagate_closed_loop(&nominal(&setup, &theta), &setup, &theta, 1).unwrap();
        let mut buf = Vec::new();
        write_diagnostics_csv(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("t,dx_norm_1,dx_norm_2,residual,degenerate"));
    }
}
