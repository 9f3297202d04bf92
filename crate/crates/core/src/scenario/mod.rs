//! Sampling baselines: uniform scenarios of the application cost and the
//! finite-difference Hessian oracle.

mod fd;

pub use fd::{default_steps, fd_evaluations, fd_hessian, FdHessian, FdOptions};

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appset::{chi2_quantile, AppCostEvaluator, Ellipsoid, FisherInfo};
use crate::error::{Error, Result};
use crate::model::{eval_matrices, ParameterVector};

/// Axis-aligned sampling box; `lower == upper` in a coordinate pins it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ScenarioBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::dim("box bounds must be nonempty and of equal length"));
        }
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("box bounds must be finite".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidArgument("box lower bound exceeds upper bound".into()));
        }
        Ok(Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &ParameterVector) -> bool {
        theta.len() == self.dim()
            && theta
                .as_slice()
                .iter()
                .enumerate()
                .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// `n` i.i.d. uniform draws from a ChaCha8 stream seeded with `seed`.
    pub fn draw(&self, n: usize, seed: u64) -> Vec<ParameterVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim())
                    .map(|i| {
                        let u: f64 = rng.random();
                        self.lower[i] + (self.upper[i] - self.lower[i]) * u
                    })
                    .collect();
                ParameterVector::new(v).expect("finite box")
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub theta: ParameterVector,
    /// `None` when the closed loop could not be simulated.
    pub vapp: Option<f64>,
    /// Spectral radius of `A(θ)` below one.
    pub stable: bool,
    pub error: Option<String>,
}

impl Scenario {
    /// Failed evaluations are never accepted.
    pub fn accepted(&self, gamma: f64) -> bool {
        self.vapp.is_some_and(|v| v <= 1.0 / gamma)
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioSet {
    pub samples: Vec<Scenario>,
    pub bounds: ScenarioBox,
    pub seed: u64,
}

/// Draws `n_k` scenarios and evaluates `V(θ_k)` for each, in parallel with
/// output ordered by sample index.
pub fn sample_scenarios(bounds: &ScenarioBox, n_k: usize, seed: u64, evaluator: &AppCostEvaluator<'_>) -> Result<ScenarioSet> {
    if n_k == 0 {
        return Err(Error::InvalidArgument("number of scenarios must be >= 1".into()));
    }
    if bounds.dim() != evaluator.theta_hat().len() {
        return Err(Error::ParameterShape {
            expected: evaluator.theta_hat().len(),
            got: bounds.dim(),
        });
    }
    let model = evaluator.setup().model.as_ref();
    let samples = bounds
        .draw(n_k, seed)
        .into_par_iter()
        .map(|theta| {
            let stable = eval_matrices(model, &theta).map(|ss| ss.is_stable()).unwrap_or(false);
            let (vapp, error) = match evaluator.cost(&theta) {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Scenario {
                theta,
                vapp,
                stable,
                error,
            }
        })
        .collect();
    Ok(ScenarioSet {
        samples,
        bounds: bounds.clone(),
        seed,
    })
}

/// Classification counts of a scenario set against an ellipsoid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationStats {
    pub samples: usize,
    pub accepted: usize,
    pub failed: usize,
    pub unstable: usize,
    /// Accepted and inside the ellipsoid.
    pub true_accepts: usize,
    /// Inside the ellipsoid but not accepted.
    pub false_accepts: usize,
    /// Rejected and outside the ellipsoid.
    pub true_rejects: usize,
    /// Accepted but outside the ellipsoid.
    pub false_rejects: usize,
    /// `true_accepts / accepted`.
    pub inside_fraction: f64,
    /// `(true_accepts + true_rejects) / samples`.
    pub accuracy: f64,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn accepted_count(&self, gamma: f64) -> usize {
        self.samples.iter().filter(|s| s.accepted(gamma)).count()
    }

    pub fn classify(&self, gamma: f64, ellipsoid: &Ellipsoid) -> Result<ClassificationStats> {
        let mut st = ClassificationStats {
            samples: self.len(),
            ..Default::default()
        };
        for s in &self.samples {
            let acc = s.accepted(gamma);
            let inside = ellipsoid.contains_point(&s.theta)?;
            st.accepted += acc as usize;
            st.failed += s.vapp.is_none() as usize;
            st.unstable += (!s.stable) as usize;
            match (acc, inside) {
                (true, true) => st.true_accepts += 1,
                (false, true) => st.false_accepts += 1,
                (false, false) => st.true_rejects += 1,
                (true, false) => st.false_rejects += 1,
            }
        }
        st.inside_fraction = if st.accepted > 0 {
            st.true_accepts as f64 / st.accepted as f64
        } else {
            0.0
        };
        st.accuracy = (st.true_accepts + st.true_rejects) as f64 / st.samples.max(1) as f64;
        Ok(st)
    }

    /// CSV columns `theta_1..theta_n, vapp, accepted, inside_ellipsoid, stable`;
    /// `vapp` is empty for failed samples.
    pub fn write_csv<W: Write>(&self, out: W, gamma: f64, ellipsoid: Option<&Ellipsoid>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.bounds.dim();
        let mut header: Vec<String> = (1..=n).map(|i| format!("theta_{i}")).collect();
        header.extend(["vapp", "accepted", "inside_ellipsoid", "stable"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.theta.as_slice().iter().map(|v| v.to_string()).collect();
            row.push(s.vapp.map(|v| v.to_string()).unwrap_or_default());
            row.push((s.accepted(gamma) as u8).to_string());
            let inside = match ellipsoid {
                Some(e) => e.contains_point(&s.theta)?,
                None => false,
            };
            row.push((inside as u8).to_string());
            row.push((s.stable as u8).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, gamma: f64, ellipsoid: Option<&Ellipsoid>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, gamma, ellipsoid)
    }
}

/// One sampled inequality `δᵀ I_F δ ≥ rhs`, `δ = θ_k − center`,
/// `rhs = γ·χ²_α(n)/N · V(θ_k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConstraint {
    pub index: usize,
    pub offset: Vec<f64>,
    pub vapp: f64,
    pub rhs: f64,
    /// `V(θ_k) = 0`: always satisfied.
    pub trivial: bool,
    pub accepted: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConstraints {
    /// The Fisher matrix the inequalities are written for, row-major.
    pub fisher: Vec<Vec<f64>>,
    pub gamma: f64,
    pub chi2: f64,
    pub experiment_length: usize,
    pub constraints: Vec<ScenarioConstraint>,
}

/// Builds the sampled inequalities for every successfully evaluated scenario.
pub fn scenario_constraints(
    set: &ScenarioSet,
    gamma: f64,
    fi: &FisherInfo,
    center: &ParameterVector,
) -> Result<ScenarioConstraints> {
    let n = fi.matrix.nrows();
    if center.len() != n || set.bounds.dim() != n {
        return Err(Error::dim("Fisher matrix, center and scenarios disagree on n"));
    }
    let chi2 = chi2_quantile(fi.alpha, n)?;
    let factor = gamma * chi2 / fi.samples as f64;
    let constraints = set
        .samples
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            s.vapp.map(|v| ScenarioConstraint {
                index,
                offset: (s.theta.as_vector() - center.as_vector()).as_slice().to_vec(),
                vapp: v,
                rhs: factor * v,
                trivial: v == 0.0,
                accepted: s.accepted(gamma),
            })
        })
        .collect();
    Ok(ScenarioConstraints {
        fisher: fi.matrix.row_iter().map(|r| r.iter().copied().collect()).collect(),
        gamma,
        chi2,
        experiment_length: fi.samples,
        constraints,
    })
}
