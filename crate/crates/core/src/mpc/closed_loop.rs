//! Receding-horizon simulation: at each step the controller condenses and
//! solves its QP, and only the first input is applied to the plant.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::condense::{condense_matrices, CondensedQp};
use super::kkt::{assemble_active_system, solve_kkt, KktSolution, KktSystem};
use super::qp::{solve_inequality_qp_with, ActiveSet, QpOptions};
use super::MpcConfig;
use crate::error::{Error, Result};
use crate::model::{
    eval_matrices, NoiseSpec, OutputDisturbanceModel, ParameterVector, ParametrizedModel,
};

/// How the controller obtains `x*(t)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEstimator {
    /// The plant state is measured directly.
    #[default]
    Direct,
    /// The controller model is augmented with a constant disturbance on
    /// each output. The model state is predicted open loop with the
    /// controller's own matrices and the disturbance estimate is reset every
    /// step to `y_meas(t) − C x̂(t)` (unit observer gain).
    OutputDisturbance,
}

pub struct Plant<'a> {
    pub model: &'a dyn ParametrizedModel,
    pub theta: &'a ParameterVector,
}

pub struct Controller<'a> {
    pub model: &'a Arc<dyn ParametrizedModel>,
    pub theta: &'a ParameterVector,
    pub estimator: StateEstimator,
}

/// How each step's QP is solved.
#[derive(Clone, Copy, Debug, Default)]
pub enum QpMode<'a> {
    /// Full inequality-constrained solve, warm-started from the previous step.
    #[default]
    Solve,
    /// Equality solve through the KKT system with the given per-step active sets.
    Frozen(&'a [ActiveSet]),
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions<'a> {
    /// Initial plant state (and controller estimate); zero when absent.
    pub x0: Option<DVector<f64>>,
    /// `u*(0)`; zero when absent.
    pub u_init: Option<DVector<f64>>,
    /// Keep the condensed QP and the KKT solution of every step.
    pub record_kkt: bool,
    pub mode: QpMode<'a>,
}

#[derive(Clone, Debug)]
pub struct StepKkt {
    pub qp: CondensedQp,
    pub solution: KktSolution,
    /// Active inequality rows stacked under `𝒞` in `𝒜`.
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    /// Plant state x(t).
    pub x: DVector<f64>,
    /// Applied input u(t).
    pub u: DVector<f64>,
    /// Measured output y(t) (before u(t) acts).
    pub y: DVector<f64>,
    /// Controller state estimate x*(t) used in the QP.
    pub estimate: DVector<f64>,
    /// Controller model-state prediction x̂(t) (equals `x` for direct feedback).
    pub x_hat: DVector<f64>,
    pub u_prev: DVector<f64>,
    pub active: ActiveSet,
    pub iterations: usize,
    /// Optimal stacked vector X of the step.
    pub solution: DVector<f64>,
    pub kkt: Option<StepKkt>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub estimator: StateEstimator,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn outputs(&self) -> Vec<DVector<f64>> {
        self.steps.iter().map(|s| s.y.clone()).collect()
    }

    pub fn active_sets(&self) -> Vec<ActiveSet> {
        self.steps.iter().map(|s| s.active.clone()).collect()
    }
}

/// Runs the closed loop for `horizon` steps, t = 1..=horizon.
pub fn run_closed_loop(
    plant: Plant<'_>,
    controller: Controller<'_>,
    config: &MpcConfig,
    horizon: usize,
    noise: &NoiseSpec,
    opts: &LoopOptions<'_>,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("closed-loop horizon must be >= 1".into()));
    }
    let pdims = plant.model.dims();
    if controller.model.dims() != pdims {
        return Err(Error::dim("plant and controller models have different dimensions"));
    }
    let augmented;
    let ctrl_model: &dyn ParametrizedModel = match controller.estimator {
        StateEstimator::Direct => controller.model.as_ref(),
        StateEstimator::OutputDisturbance => {
            augmented = OutputDisturbanceModel::new(Arc::clone(controller.model));
            &augmented
        }
    };
    config.validate(ctrl_model.dims())?;
    if let QpMode::Frozen(sets) = opts.mode {
        if sets.len() < horizon {
            return Err(Error::dim(format!(
                "frozen mode needs {horizon} active sets, got {}",
                sets.len()
            )));
        }
    }

    let p_ss = eval_matrices(plant.model, plant.theta)?;
    let c_base = eval_matrices(controller.model.as_ref(), controller.theta)?;
    let c_ss = eval_matrices(ctrl_model, controller.theta)?;

    let mut x = opts.x0.clone().unwrap_or_else(|| DVector::zeros(pdims.n_x));
    if x.len() != pdims.n_x {
        return Err(Error::dim("x0 has the wrong length"));
    }
    let mut u_prev = opts.u_init.clone().unwrap_or_else(|| DVector::zeros(pdims.n_u));
    if u_prev.len() != pdims.n_u {
        return Err(Error::dim("u_init has the wrong length"));
    }
    let mut x_hat = x.clone();
    let mut sampler = noise.sampler();
    let mut warm: Option<ActiveSet> = None;
    let mut steps = Vec::with_capacity(horizon);

    for t in 1..=horizon {
        let y = &p_ss.c * &x + sampler.draw(pdims.n_y);
        let estimate = match controller.estimator {
            StateEstimator::Direct => {
                x_hat = x.clone();
                x.clone()
            }
            StateEstimator::OutputDisturbance => {
                let d = &y - &c_base.c * &x_hat;
                let mut e = DVector::zeros(pdims.n_x + pdims.n_y);
                e.rows_mut(0, pdims.n_x).copy_from(&x_hat);
                e.rows_mut(pdims.n_x, pdims.n_y).copy_from(&d);
                e
            }
        };
        let qp = condense_matrices(&c_ss, config, &estimate, &u_prev, t).map_err(|e| e.at_step(t))?;

        let (solution, active, iterations, kkt) = match opts.mode {
            QpMode::Solve => {
                let sol = solve_inequality_qp_with(
                    &qp,
                    &QpOptions {
                        warm_start: warm.take(),
                        ..Default::default()
                    },
                )
                .map_err(|e| e.at_step(t))?;
                let kkt = if opts.record_kkt {
                    Some(kkt_for(&qp, &sol.active).map_err(|e| e.at_step(t))?)
                } else {
                    None
                };
                (sol.x, sol.active, sol.iterations, kkt)
            }
            QpMode::Frozen(sets) => {
                let active = sets[t - 1].clone();
                let k = kkt_for(&qp, &active).map_err(|e| e.at_step(t))?;
                let x_opt = k.solution.x.clone();
                (x_opt, active, 0, opts.record_kkt.then_some(k))
            }
        };

        let u = qp.layout.first_input(&solution);
        warm = Some(active.clone());
        steps.push(StepRecord {
            t,
            x: x.clone(),
            u: u.clone(),
            y,
            estimate,
            x_hat: x_hat.clone(),
            u_prev: u_prev.clone(),
            active,
            iterations,
            solution,
            kkt,
        });

        if controller.estimator == StateEstimator::OutputDisturbance {
            x_hat = &c_base.a * &x_hat + &c_base.b * &u;
        }
        x = &p_ss.a * &x + &p_ss.b * &u;
        u_prev = u;
    }
    Ok(Trajectory {
        steps,
        estimator: controller.estimator,
    })
}

fn kkt_for(qp: &CondensedQp, active: &ActiveSet) -> Result<StepKkt> {
    let sys = assemble_active_system(qp, active)?;
    let kkt = KktSystem::new(qp, &sys);
    let solution = solve_kkt(&kkt)?;
    Ok(StepKkt {
        qp: qp.clone(),
        solution,
        rows: sys.rows,
    })
}

/// Shared count of closed-loop simulations; clones share the count.
#[derive(Clone, Debug, Default)]
pub struct SimulationCounter(Arc<AtomicUsize>);

impl SimulationCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Everything needed to run the plant/controller pair for a given
/// controller parameter, with the plant fixed at its own parameter.
#[derive(Clone, Debug)]
pub struct LoopSetup {
    pub model: Arc<dyn ParametrizedModel>,
    pub config: MpcConfig,
    pub estimator: StateEstimator,
    pub x0: DVector<f64>,
    /// Closed-loop length T.
    pub horizon: usize,
    /// Incremented by every [`LoopSetup::simulate`] call.
    pub counter: SimulationCounter,
}

impl LoopSetup {
    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// The model the controller condenses (augmented when integral action is on).
    pub fn controller_model(&self) -> Arc<dyn ParametrizedModel> {
        match self.estimator {
            StateEstimator::Direct => Arc::clone(&self.model),
            StateEstimator::OutputDisturbance => {
                Arc::new(OutputDisturbanceModel::new(Arc::clone(&self.model)))
            }
        }
    }

    pub fn simulate(
        &self,
        theta_ctrl: &ParameterVector,
        theta_plant: &ParameterVector,
        noise: &NoiseSpec,
        record_kkt: bool,
        mode: QpMode<'_>,
    ) -> Result<Trajectory> {
        self.counter.bump();
        run_closed_loop(
            Plant {
                model: self.model.as_ref(),
                theta: theta_plant,
            },
            Controller {
                model: &self.model,
                theta: theta_ctrl,
                estimator: self.estimator,
            },
            &self.config,
            self.horizon,
            noise,
            &LoopOptions {
                x0: Some(self.x0.clone()),
                u_init: None,
                record_kkt,
                mode,
            },
        )
    }
}
