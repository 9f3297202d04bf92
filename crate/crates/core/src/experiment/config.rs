//! TOML experiment description and its translation into library objects.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::appset::{matrix_from_rows, AppCostSpec, FisherInfo};
use crate::error::{Error, Result};
use crate::model::{AffineModel, IndexEntry, NoiseSpec, ParameterVector, ParametrizedModel, StateSpace};
use crate::mpc::{LoopSetup, MpcConfig, Reference, SimulationCounter, StateEstimator};
use crate::scenario::{FdOptions, ScenarioBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Closed-loop length T.
    pub steps: usize,
    /// Parameter estimate θ̂; also the plant parameter of every simulation.
    pub theta_hat: Vec<f64>,
    #[serde(default)]
    pub estimator: StateEstimator,
    /// Initial plant state; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub model: ModelSpec,
    /// Output noise for the measured trajectory column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub mpc: MpcSpec,
    pub app_cost: AppCostSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher: Option<FisherSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub sensitivity: SensitivitySpec,
    #[serde(default)]
    pub fd: FdOptions,
}

/// Affine model: base matrices plus an index map of parameter entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub params: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSpec {
    pub horizon_u: usize,
    pub horizon_y: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub reference: ReferenceSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Constant { value: Vec<f64> },
    SquareWave { amplitude: Vec<f64>, period: usize },
    Table { values: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherSpec {
    pub matrix: Vec<Vec<f64>>,
    /// Experiment length N.
    pub samples: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// N_k; zero skips the stage.
    pub samples: usize,
    pub seed: u64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySpec {
    pub order: usize,
}

impl Default for SensitivitySpec {
    fn default() -> Self {
        Self { order: 1 }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Validates the config and builds the runnable objects. Every failure is
    /// reported as a config error.
    pub fn build(&self) -> Result<Experiment> {
        self.build_inner().map_err(config_err)
    }

    fn build_inner(&self) -> Result<Experiment> {
        if self.steps == 0 {
            return Err(Error::Config("steps: closed-loop length must be >= 1".into()));
        }
        let theta_hat = ParameterVector::new(self.theta_hat.clone())
            .map_err(|e| Error::Config(format!("theta_hat: {e}")))?;
        let n = theta_hat.len();
        let model = self.model.build(n).map_err(|e| Error::Config(format!("model: {e}")))?;
        let dims = model.dims();
        let config = self.mpc.build().map_err(|e| Error::Config(format!("mpc: {e}")))?;
        let ctrl_dims = match self.estimator {
            StateEstimator::Direct => dims,
            StateEstimator::OutputDisturbance => crate::model::Dims {
                n_x: dims.n_x + dims.n_y,
                ..dims
            },
        };
        config
            .validate(ctrl_dims)
            .map_err(|e| Error::Config(format!("mpc: {e}")))?;
        let x0 = match &self.x0 {
            Some(v) if v.len() != dims.n_x => {
                return Err(Error::Config(format!("x0: expected {} entries, got {}", dims.n_x, v.len())))
            }
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(dims.n_x),
        };
        if let Some(noise) = &self.noise {
            NoiseSpec::new(noise.variance, noise.seed).map_err(|e| Error::Config(format!("noise: {e}")))?;
        }
        self.app_cost
            .validate()
            .map_err(|e| Error::Config(format!("app_cost: {e}")))?;
        if self.app_cost.m > self.steps {
            return Err(Error::Config(format!(
                "app_cost.m: horizon {} exceeds steps {}",
                self.app_cost.m, self.steps
            )));
        }
        let fisher = match &self.fisher {
            Some(f) => {
                let m = matrix_from_rows(&f.matrix).map_err(|e| Error::Config(format!("fisher.matrix: {e}")))?;
                if m.nrows() != n {
                    return Err(Error::Config(format!("fisher.matrix: expected {n}x{n}")));
                }
                Some(FisherInfo::new(m, f.samples, f.alpha).map_err(|e| Error::Config(format!("fisher: {e}")))?)
            }
            None => None,
        };
        let scenario = match &self.scenario {
            Some(s) => {
                let b = ScenarioBox::new(s.lower.clone(), s.upper.clone())
                    .map_err(|e| Error::Config(format!("scenario: {e}")))?;
                if b.dim() != n {
                    return Err(Error::Config(format!("scenario: box must have {n} coordinates")));
                }
                Some((b, s.samples, s.seed))
            }
            None => None,
        };
        if !(1..=2).contains(&self.sensitivity.order) {
            return Err(Error::Config("sensitivity.order: must be 1 or 2".into()));
        }
        if let Some(h) = self.fd.step {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Config("fd.step: must be positive".into()));
            }
        }
        Ok(Experiment {
            name: self.name.clone(),
            setup: LoopSetup {
                model,
                config,
                estimator: self.estimator,
                x0,
                horizon: self.steps,
                counter: SimulationCounter::default(),
            },
            theta_hat,
            cost: self.app_cost,
            noise: self.noise.unwrap_or_else(NoiseSpec::none),
            fisher,
            scenario,
            order: self.sensitivity.order,
            fd: self.fd,
        })
    }
}

impl ModelSpec {
    pub fn build(&self, n_params: usize) -> Result<Arc<dyn ParametrizedModel>> {
        let base = StateSpace {
            a: matrix_from_rows(&self.a)?,
            b: matrix_from_rows(&self.b)?,
            c: matrix_from_rows(&self.c)?,
        };
        if let Some(e) = self.params.iter().find(|e| e.param >= n_params) {
            return Err(Error::IndexOutOfRange {
                index: e.param,
                n: n_params,
            });
        }
        Ok(Arc::new(AffineModel::from_index_map(base, n_params, &self.params)?))
    }
}

impl MpcSpec {
    pub fn build(&self) -> Result<MpcConfig> {
        let v = |x: &Vec<f64>| DVector::from_vec(x.clone());
        let reference = match &self.reference {
            ReferenceSpec::Constant { value } => Reference::Constant(v(value)),
            ReferenceSpec::SquareWave { amplitude, period } => Reference::SquareWave {
                amplitude: v(amplitude),
                period: *period,
            },
            ReferenceSpec::Table { values } => Reference::Table(values.iter().map(v).collect()),
        };
        Ok(MpcConfig {
            horizon_u: self.horizon_u,
            horizon_y: self.horizon_y,
            q: matrix_from_rows(&self.q)?,
            r: matrix_from_rows(&self.r)?,
            u_min: v(&self.u_min),
            u_max: v(&self.u_max),
            y_min: v(&self.y_min),
            y_max: v(&self.y_max),
            reference,
        })
    }
}

/// A validated experiment, ready to run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub name: String,
    pub setup: LoopSetup,
    pub theta_hat: ParameterVector,
    pub cost: AppCostSpec,
    pub noise: NoiseSpec,
    pub fisher: Option<FisherInfo>,
    /// Box, N_k and seed.
    pub scenario: Option<(ScenarioBox, usize, u64)>,
    pub order: usize,
    pub fd: FdOptions,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
