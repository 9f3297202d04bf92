//! Application cost `V(θ) = (1/M) Σ ‖y(t, θ̂, θ̂) − y(t, θ, θ̂)‖²` and its
//! Gauss–Newton Hessian from one sensitivity run.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{NoiseSpec, ParameterVector};
use crate::mpc::{LoopSetup, QpMode, Reference, Trajectory};
use crate::sensitivity::{propagate_closed_loop, SensitivityBundle};

/// Evaluates `V(θ)` against a cached nominal run (controller and plant at θ̂).
/// Every call to [`AppCostEvaluator::cost`] is one closed-loop simulation.
#[derive(Clone, Debug)]
pub struct AppCostEvaluator<'a> {
    setup: &'a LoopSetup,
    theta_hat: ParameterVector,
    nominal: Vec<DVector<f64>>,
    m: usize,
}

impl<'a> AppCostEvaluator<'a> {
    pub fn new(setup: &'a LoopSetup, theta_hat: &ParameterVector, m: usize) -> Result<Self> {
        let traj = setup.simulate(theta_hat, theta_hat, &NoiseSpec::none(), false, QpMode::Solve)?;
        Self::from_trajectory(setup, theta_hat, &traj, m)
    }

    /// Reuses an already simulated nominal run.
    pub fn from_trajectory(setup: &'a LoopSetup, theta_hat: &ParameterVector, nominal: &Trajectory, m: usize) -> Result<Self> {
        check_horizon(m, nominal.len())?;
        if theta_hat.len() != setup.n_params() {
            return Err(Error::ParameterShape {
                expected: setup.n_params(),
                got: theta_hat.len(),
            });
        }
        Ok(Self {
            setup,
            theta_hat: theta_hat.clone(),
            nominal: nominal.outputs(),
            m,
        })
    }

    pub fn horizon(&self) -> usize {
        self.m
    }

    pub fn theta_hat(&self) -> &ParameterVector {
        &self.theta_hat
    }

    pub fn setup(&self) -> &LoopSetup {
        self.setup
    }

    pub fn nominal_outputs(&self) -> &[DVector<f64>] {
        &self.nominal
    }

    /// Output trajectory with the controller at θ and the plant at θ̂.
    pub fn outputs(&self, theta: &ParameterVector) -> Result<Vec<DVector<f64>>> {
        let traj = self
            .setup
            .simulate(theta, &self.theta_hat, &NoiseSpec::none(), false, QpMode::Solve)
            .map_err(|e| Error::Evaluation {
                theta: theta.as_slice().to_vec(),
                source: Box::new(e),
            })?;
        Ok(traj.outputs())
    }

    pub fn cost(&self, theta: &ParameterVector) -> Result<f64> {
        let y = self.outputs(theta)?;
        Ok(mean_squared_gap(&self.nominal, &y, self.m))
    }
}

fn check_horizon(m: usize, available: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("cost horizon M must be >= 1".into()));
    }
    if m > available {
        return Err(Error::dim(format!("cost horizon M={m} exceeds the {available} simulated steps")));
    }
    Ok(())
}

fn mean_squared_gap(a: &[DVector<f64>], b: &[DVector<f64>], m: usize) -> f64 {
    a.iter().zip(b).take(m).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / m as f64
}

/// `V(θ)` from scratch: two closed-loop simulations.
pub fn app_cost(theta: &ParameterVector, theta_hat: &ParameterVector, setup: &LoopSetup, m: usize) -> Result<f64> {
    AppCostEvaluator::new(setup, theta_hat, m)?.cost(theta)
}

/// `(1/M) Σ ‖y(t) − r(t)‖²` over a recorded run.
pub fn tracking_cost(trajectory: &Trajectory, reference: &Reference, m: usize) -> Result<f64> {
    check_horizon(m, trajectory.len())?;
    Ok(trajectory
        .steps
        .iter()
        .take(m)
        .map(|s| (&s.y - reference.at(s.t)).norm_squared())
        .sum::<f64>()
        / m as f64)
}

/// `H = (2/M) Σ_{t≤M} (∂y(t)/∂θ)ᵀ(∂y(t)/∂θ)`.
pub fn app_hessian(bundle: &SensitivityBundle, m: usize) -> Result<DMatrix<f64>> {
    check_horizon(m, bundle.len())?;
    let n = bundle.n_params;
    let mut h = DMatrix::zeros(n, n);
    for dy in bundle.dy.iter().take(m) {
        h += dy.transpose() * dy;
    }
    h *= 2.0 / m as f64;
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Clone, Debug)]
pub struct PerturbationHessian {
    pub trajectory: Trajectory,
    pub bundle: SensitivityBundle,
    pub hessian: DMatrix<f64>,
}

/// The one-simulation path: nominal run with KKT data, sensitivity
/// propagation, Gauss–Newton Hessian.
pub fn perturbation_hessian(setup: &LoopSetup, theta_hat: &ParameterVector, m: usize, order: usize) -> Result<PerturbationHessian> {
    let trajectory = setup
        .simulate(theta_hat, theta_hat, &NoiseSpec::none(), true, QpMode::Solve)
        .map_err(|e| e.in_stage("nominal"))?;
    let bundle = propagate_closed_loop(&trajectory, setup, theta_hat, order).map_err(|e| e.in_stage("sensitivity"))?;
    let hessian = app_hessian(&bundle, m).map_err(|e| e.in_stage("hessian"))?;
    Ok(PerturbationHessian {
        trajectory,
        bundle,
        hessian,
    })
}

/// Spectral-norm relative difference `‖A − B‖₂ / ‖B‖₂`.
pub fn spectral_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let num = (a - b).clone().svd(false, false).singular_values.max();
    let den = b.clone().svd(false, false).singular_values.max();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::example1_setup;

    fn th(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_at_theta_hat() {
        let setup = example1_setup();
        let t = th(&[0.6, 0.9]);
        assert_eq!(app_cost(&t, &t, &setup, 100).unwrap(), 0.0);
    }

    #[test]
    fn positive_away_from_theta_hat() {
        let setup = example1_setup();
        let v = app_cost(&th(&[0.65, 0.9]), &th(&[0.6, 0.9]), &setup, 100).unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn counts_simulations() {
        let setup = example1_setup();
        let t = th(&[0.6, 0.9]);
        let ev = AppCostEvaluator::new(&setup, &t, 100).unwrap();
        assert_eq!(setup.counter.get(), 1);
        ev.cost(&th(&[0.61, 0.9])).unwrap();
        ev.cost(&th(&[0.59, 0.9])).unwrap();
        assert_eq!(setup.counter.get(), 3);
    }

    #[test]
    fn horizon_checks() {
        let setup = example1_setup();
        let t = th(&[0.6, 0.9]);
        assert!(app_cost(&t, &t, &setup, 0).is_err());
        assert!(app_cost(&t, &t, &setup, 101).is_err());
    }

    #[test]
    fn zero_bundle_gives_zero_hessian() {
        let bundle = SensitivityBundle {
            n_params: 2,
            dy: vec![DMatrix::zeros(1, 2); 5],
            du: vec![DMatrix::zeros(1, 2); 5],
            dx: vec![DMatrix::zeros(1, 2); 5],
            d2y: None,
            steps: Vec::new(),
            warnings: Vec::new(),
        };
        assert_eq!(app_hessian(&bundle, 5).unwrap(), DMatrix::zeros(2, 2));
        assert!(app_hessian(&bundle, 6).is_err());
    }

    #[test]
    fn perturbation_path_is_one_simulation() {
        let setup = example1_setup();
        let p = perturbation_hessian(&setup, &th(&[0.6, 0.9]), 100, 1).unwrap();
        assert_eq!(setup.counter.get(), 1);
        let ev = p.hessian.clone().symmetric_eigenvalues();
        assert!(ev.min() >= -1e-10 * p.hessian.norm());
    }
}
