//! Condensed MPC quadratic program, its inequality solver, the
//! frozen-active-set KKT route and the receding-horizon loop.

mod closed_loop;
mod condense;
mod kkt;
mod qp;

pub use closed_loop::{
    run_closed_loop, Controller, LoopOptions, LoopSetup, Plant, QpMode, SimulationCounter, StateEstimator,
    StepKkt, StepRecord, Trajectory,
};
pub use condense::{condense, condense_matrices, CondensedQp, QpDerivative, QpLayout};
pub use kkt::{
    assemble_active_system, solve_kkt, ActiveSystem, KktFactor, KktSolution, KktSystem,
};
pub use qp::{solve_inequality_qp, solve_inequality_qp_with, ActiveSet, QpOptions, QpSolution};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::Dims;

/// Reference trajectory r(t), t = 1, 2, ...
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    Constant(DVector<f64>),
    /// `+amplitude` for the first half of each period, `-amplitude` for the second.
    SquareWave { amplitude: DVector<f64>, period: usize },
    /// Explicit samples for t = 1..=len; the last sample is held afterwards.
    Table(Vec<DVector<f64>>),
}

impl Reference {
    pub fn at(&self, t: usize) -> DVector<f64> {
        match self {
            Reference::Constant(r) => r.clone(),
            Reference::SquareWave { amplitude, period } => {
                let phase = (t.max(1) - 1) % period;
                if 2 * phase < *period {
                    amplitude.clone()
                } else {
                    -amplitude
                }
            }
            Reference::Table(rows) => rows[(t.max(1) - 1).min(rows.len() - 1)].clone(),
        }
    }

    fn channels(&self) -> Option<usize> {
        match self {
            Reference::Constant(r) => Some(r.len()),
            Reference::SquareWave { amplitude, .. } => Some(amplitude.len()),
            Reference::Table(rows) => rows.first().map(|r| r.len()),
        }
    }
}

/// MPC tuning: horizons, weights, bounds and reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub horizon_u: usize,
    pub horizon_y: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub y_min: DVector<f64>,
    pub y_max: DVector<f64>,
    pub reference: Reference,
}

impl MpcConfig {
    /// The common horizon N = N_u = N_y.
    pub fn horizon(&self) -> usize {
        self.horizon_u
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.horizon_u == 0 || self.horizon_y == 0 {
            return Err(Error::InvalidArgument("horizons must be positive".into()));
        }
        if self.horizon_u != self.horizon_y {
            return Err(Error::InvalidArgument(format!(
                "control and prediction horizons must be equal (N_u={}, N_y={})",
                self.horizon_u, self.horizon_y
            )));
        }
        let sq = |m: &DMatrix<f64>, n: usize, name: &str| {
            if m.nrows() != n || m.ncols() != n {
                Err(Error::dim(format!("{name} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols())))
            } else {
                Ok(())
            }
        };
        sq(&self.q, dims.n_y, "Q")?;
        sq(&self.r, dims.n_u, "R")?;
        for (v, n, name) in [
            (&self.u_min, dims.n_u, "u_min"),
            (&self.u_max, dims.n_u, "u_max"),
            (&self.y_min, dims.n_y, "y_min"),
            (&self.y_max, dims.n_y, "y_max"),
        ] {
            if v.len() != n {
                return Err(Error::dim(format!("{name} has length {}, expected {n}", v.len())));
            }
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("u_min must be < u_max componentwise".into()));
        }
        if self.y_min.iter().zip(self.y_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("y_min must be < y_max componentwise".into()));
        }
        if (&self.q - self.q.transpose()).amax() > 1e-12 * (1.0 + self.q.amax())
            || self.q.clone().symmetric_eigenvalues().min() < -1e-12 * (1.0 + self.q.amax())
        {
            return Err(Error::InvalidArgument("Q must be symmetric positive semidefinite".into()));
        }
        if (&self.r - self.r.transpose()).amax() > 1e-12 * (1.0 + self.r.amax())
            || self.r.clone().symmetric_eigenvalues().min() <= 0.0
        {
            return Err(Error::InvalidArgument("R must be symmetric positive definite".into()));
        }
        match &self.reference {
            Reference::SquareWave { period, .. } if *period == 0 => {
                return Err(Error::InvalidArgument("square-wave period must be positive".into()))
            }
            Reference::Table(rows) if rows.is_empty() => {
                return Err(Error::InvalidArgument("reference table is empty".into()))
            }
            Reference::Table(rows) if rows.iter().any(|r| r.len() != dims.n_y) => {
                return Err(Error::dim("reference table rows must have n_y entries"))
            }
            _ => {}
        }
        if self.reference.channels() != Some(dims.n_y) {
            return Err(Error::dim("reference must have n_y channels"));
        }
        Ok(())
    }
}
