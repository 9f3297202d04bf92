//! Ellipsoids `{θ : (θ − c)ᵀP(θ − c) ≤ level}` and the containment test.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::chi2::chi2_quantile;
use super::FisherInfo;
use crate::error::{Error, Result};
use crate::model::ParameterVector;

/// Absolute tolerance on symmetry/PSD checks, scaled by `max(1, ‖P‖)`.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: ParameterVector,
    /// Symmetric PSD shape matrix P.
    pub shape: DMatrix<f64>,
    pub level: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Inside,
    Outside,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemiAxis {
    /// `sqrt(level / eigenvalue)`; `None` for a flat direction (unbounded).
    pub length: Option<f64>,
    pub direction: Vec<f64>,
}

/// JSON form: row-major shape plus semi-axes for plotting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EllipsoidJson {
    pub center: Vec<f64>,
    pub shape: Vec<Vec<f64>>,
    pub level: f64,
    pub semi_axes: Vec<SemiAxis>,
    pub degenerate: bool,
}

fn scale(m: &DMatrix<f64>) -> f64 {
    m.amax().max(1.0)
}

impl Ellipsoid {
    /// Validates the shape (symmetric and PSD to [`PSD_TOL`]) and stores its
    /// symmetric part.
    pub fn new(center: ParameterVector, shape: DMatrix<f64>, level: f64) -> Result<Self> {
        let n = center.len();
        if shape.nrows() != n || shape.ncols() != n {
            return Err(Error::dim(format!(
                "shape is {}x{}, center has {n} entries",
                shape.nrows(),
                shape.ncols()
            )));
        }
        if !(level > 0.0) || !level.is_finite() {
            return Err(Error::InvalidArgument(format!("ellipsoid level must be positive, got {level}")));
        }
        if shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("shape matrix has non-finite entries".into()));
        }
        let s = scale(&shape);
        if (&shape - shape.transpose()).amax() > PSD_TOL * s {
            return Err(Error::InvalidArgument("shape matrix is not symmetric".into()));
        }
        let shape = (&shape + shape.transpose()) * 0.5;
        if shape.clone().symmetric_eigenvalues().min() < -PSD_TOL * s {
            return Err(Error::InvalidArgument("shape matrix is not positive semidefinite".into()));
        }
        Ok(Self { center, shape, level })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn quad_form(&self, theta: &ParameterVector) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::ParameterShape {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        let d = theta.as_vector() - self.center.as_vector();
        Ok(d.dot(&(&self.shape * &d)))
    }

    /// Boundary points count as inside.
    pub fn contains_point(&self, theta: &ParameterVector) -> Result<bool> {
        Ok(self.quad_form(theta)? <= self.level * (1.0 + 1e-12))
    }

    /// Eigenvalues below `1e-12·λ_max` are treated as zero.
    pub fn is_degenerate(&self) -> bool {
        let ev = self.shape.clone().symmetric_eigenvalues();
        ev.min() <= 1e-12 * ev.amax()
    }

    /// Semi-axes in ascending order of eigenvalue (longest first).
    pub fn semi_axes(&self) -> Vec<SemiAxis> {
        let eig = self.shape.clone().symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let mut order: Vec<usize> = (0..self.dim()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        order
            .into_iter()
            .map(|k| {
                let lam = eig.eigenvalues[k];
                let mut dir = eig.eigenvectors.column(k).into_owned();
                // deterministic sign: first nonzero component positive
                if let Some(v) = dir.iter().find(|v| v.abs() > 1e-12) {
                    if *v < 0.0 {
                        dir = -dir;
                    }
                }
                SemiAxis {
                    length: (lam > 1e-12 * top && lam > 0.0).then(|| (self.level / lam).sqrt()),
                    direction: dir.as_slice().to_vec(),
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> EllipsoidJson {
        EllipsoidJson {
            center: self.center.as_slice().to_vec(),
            shape: self.shape.row_iter().map(|r| r.iter().copied().collect()).collect(),
            level: self.level,
            semi_axes: self.semi_axes(),
            degenerate: self.is_degenerate(),
        }
    }
}

/// `{θ : (θ − θ̂)ᵀH(θ − θ̂) ≤ 2/γ}`.
pub fn application_ellipsoid(hessian: &DMatrix<f64>, gamma: f64, theta_hat: &ParameterVector) -> Result<Ellipsoid> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ellipsoid::new(theta_hat.clone(), hessian.clone(), 2.0 / gamma)
}

/// `{θ : (θ − center)ᵀI_F(θ − center) ≤ χ²_α(n)/N}`.
pub fn identification_ellipsoid(fi: &FisherInfo, center: &ParameterVector) -> Result<Ellipsoid> {
    let n = fi.matrix.nrows();
    let level = chi2_quantile(fi.alpha, n)? / fi.samples as f64;
    Ellipsoid::new(center.clone(), fi.matrix.clone(), level)
}

/// True iff `inner ⊆ outer` for concentric ellipsoids, tested as
/// `(c_out/c_in)·P_in − P_out ⪰ −tol`.
pub fn contains(outer: &Ellipsoid, inner: &Ellipsoid) -> Result<bool> {
    if outer.dim() != inner.dim() {
        return Err(Error::dim("ellipsoids have different dimensions"));
    }
    let gap = (outer.center.as_vector() - inner.center.as_vector()).amax();
    if gap > 1e-12 * (1.0 + outer.center.as_vector().amax()) {
        return Err(Error::InvalidArgument(format!("ellipsoid centers differ by {gap:.3e}")));
    }
    let m = &inner.shape * (outer.level / inner.level) - &outer.shape;
    let m = (&m + m.transpose()) * 0.5;
    let tol = PSD_TOL * scale(&(&inner.shape * (outer.level / inner.level))).max(scale(&outer.shape));
    Ok(m.symmetric_eigenvalues().min() >= -tol)
}

pub fn classify(theta: &ParameterVector, ellipsoid: &Ellipsoid) -> Result<Region> {
    Ok(if ellipsoid.contains_point(theta)? {
        Region::Inside
    } else {
        Region::Outside
    })
}

/// Builds a matrix from nested rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::dim("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}
