//! Application cost, its quadratic approximation and the ellipsoids used to
//! state the identification/application set constraint.

mod chi2;
mod cost;
mod ellipsoid;

pub use chi2::{chi2_cdf, chi2_quantile, gamma_p, ln_gamma};
pub use cost::{
    app_cost, app_hessian, perturbation_hessian, spectral_rel_diff, tracking_cost, AppCostEvaluator,
    PerturbationHessian,
};
pub use ellipsoid::{
    application_ellipsoid, classify, contains, identification_ellipsoid, matrix_from_rows, Ellipsoid,
    EllipsoidJson, Region, SemiAxis, PSD_TOL,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterVector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// γ is used as given.
    #[default]
    Absolute,
    /// γ is the numerator of `γ / V(θ̂)`, with V the nominal tracking cost.
    Relative,
}

/// Evaluation horizon and accuracy of the application cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppCostSpec {
    /// Horizon M.
    pub m: usize,
    pub gamma: f64,
    #[serde(default)]
    pub gamma_mode: GammaMode,
}

impl AppCostSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidArgument("cost horizon M must be >= 1".into()));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Effective γ given the nominal tracking cost.
    pub fn resolve_gamma(&self, tracking: f64) -> Result<f64> {
        match self.gamma_mode {
            GammaMode::Absolute => Ok(self.gamma),
            GammaMode::Relative if tracking > 0.0 => Ok(self.gamma / tracking),
            GammaMode::Relative => Err(Error::InvalidArgument(
                "relative gamma needs a nonzero nominal tracking cost".into(),
            )),
        }
    }
}

/// Per-sample Fisher information with experiment length and confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    /// Experiment length N.
    pub samples: usize,
    pub alpha: f64,
}

impl FisherInfo {
    pub fn new(matrix: DMatrix<f64>, samples: usize, alpha: f64) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::dim("Fisher information must be a nonempty square matrix"));
        }
        if samples == 0 {
            return Err(Error::InvalidArgument("experiment length N must be >= 1".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        // reuse the ellipsoid shape checks
        Ellipsoid::new(ParameterVector::new(vec![0.0; matrix.nrows()])?, matrix.clone(), 1.0)?;
        Ok(Self {
            matrix,
            samples,
            alpha,
        })
    }
}
