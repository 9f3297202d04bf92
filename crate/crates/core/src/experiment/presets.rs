//! Built-in experiments.
//!
//! `example1`: scalar plant `x(t+1) = θ₂x(t) + u(t)`, `y = θ₁x(t)` at
//! θ₀ = [0.6, 0.9], tracking a square wave of amplitude 1 and period 40
//! with T = M = 100. The reference and the sampling box are choices of this
//! crate.
//!
//! `example2`: two-state, two-input, two-output plant with a fixed output
//! matrix and all eight entries of A and B as parameters. The true values
//! are chosen here (stable, well-conditioned steady-state gain), the
//! controller uses output-disturbance integral action, and γ is set
//! relative to the nominal tracking cost.

use crate::appset::{AppCostSpec, GammaMode};
use crate::error::{Error, Result};
use crate::model::{IndexEntry, MatrixId, NoiseSpec};
use crate::mpc::StateEstimator;
use crate::scenario::FdOptions;

use super::config::{ExperimentConfig, FisherSpec, ModelSpec, MpcSpec, ReferenceSpec, ScenarioSpec, SensitivitySpec};

pub const PRESETS: [&str; 2] = ["example1", "example2"];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "example1" => Ok(example1()),
        "example2" => Ok(example2()),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; available: {}",
            PRESETS.join(", ")
        ))),
    }
}

fn entry(param: usize, matrix: MatrixId, row: usize, col: usize) -> IndexEntry {
    IndexEntry {
        param,
        matrix,
        row,
        col,
        coefficient: 1.0,
    }
}

pub fn example1() -> ExperimentConfig {
    ExperimentConfig {
        name: "example1".into(),
        steps: 100,
        theta_hat: vec![0.6, 0.9],
        estimator: StateEstimator::Direct,
        x0: None,
        model: ModelSpec {
            a: vec![vec![0.0]],
            b: vec![vec![1.0]],
            c: vec![vec![0.0]],
            params: vec![entry(0, MatrixId::C, 0, 0), entry(1, MatrixId::A, 0, 0)],
        },
        noise: None,
        mpc: MpcSpec {
            horizon_u: 5,
            horizon_y: 5,
            q: vec![vec![10.0]],
            r: vec![vec![1.0]],
            u_min: vec![-1.0],
            u_max: vec![1.0],
            y_min: vec![-2.0],
            y_max: vec![2.0],
            reference: ReferenceSpec::SquareWave {
                amplitude: vec![1.0],
                period: 40,
            },
        },
        app_cost: AppCostSpec {
            m: 100,
            gamma: 1000.0,
            gamma_mode: GammaMode::Absolute,
        },
        fisher: Some(FisherSpec {
            matrix: vec![vec![160.0, 110.0], vec![110.0, 100.0]],
            samples: 100,
            alpha: 0.95,
        }),
        scenario: Some(ScenarioSpec {
            samples: 400,
            seed: 3,
            lower: vec![0.53, 0.83],
            upper: vec![0.67, 0.97],
        }),
        sensitivity: SensitivitySpec::default(),
        fd: FdOptions::default(),
    }
}

const EX2_C: [[f64; 2]; 2] = [[-0.8954, 0.1421], [-0.2118, -0.1360]];

pub fn example2() -> ExperimentConfig {
    let mut params = Vec::new();
    for (k, (m, r, c)) in [
        (MatrixId::A, 0, 0),
        (MatrixId::A, 0, 1),
        (MatrixId::A, 1, 0),
        (MatrixId::A, 1, 1),
        (MatrixId::B, 0, 0),
        (MatrixId::B, 0, 1),
        (MatrixId::B, 1, 0),
        (MatrixId::B, 1, 1),
    ]
    .into_iter()
    .enumerate()
    {
        params.push(entry(k, m, r, c));
    }
    let theta_hat = vec![0.85, 0.10, -0.05, 0.70, 0.30, -0.20, 0.10, 0.40];
    let lower = theta_hat.iter().map(|t| t - 0.008).collect();
    let upper = theta_hat.iter().map(|t| t + 0.008).collect();
    ExperimentConfig {
        name: "example2".into(),
        steps: 100,
        theta_hat,
        estimator: StateEstimator::OutputDisturbance,
        x0: None,
        model: ModelSpec {
            a: vec![vec![0.0; 2]; 2],
            b: vec![vec![0.0; 2]; 2],
            c: EX2_C.iter().map(|r| r.to_vec()).collect(),
            params,
        },
        noise: Some(NoiseSpec {
            variance: 0.001,
            seed: 2,
        }),
        mpc: MpcSpec {
            horizon_u: 5,
            horizon_y: 5,
            q: vec![vec![10.0, 0.0], vec![0.0, 10.0]],
            r: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            u_min: vec![-0.8, -0.8],
            u_max: vec![0.8, 0.8],
            y_min: vec![-1.0, -1.0],
            y_max: vec![1.0, 1.0],
            reference: ReferenceSpec::SquareWave {
                amplitude: vec![0.3, -0.1],
                period: 50,
            },
        },
        app_cost: AppCostSpec {
            m: 100,
            gamma: 100.0,
            gamma_mode: GammaMode::Relative,
        },
        fisher: None,
        scenario: Some(ScenarioSpec {
            samples: 100,
            seed: 2,
            lower,
            upper,
        }),
        sensitivity: SensitivitySpec::default(),
        fd: FdOptions::default(),
    }
}
