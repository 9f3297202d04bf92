//! Central finite-difference Hessian, optionally Richardson-extrapolated
//! over three step levels.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterVector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdOptions {
    /// Uniform step h; defaults to `1e-4·(1 + |θ̂ᵢ|)` per coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Extrapolate over steps h, h/2, h/4.
    #[serde(default)]
    pub richardson: bool,
}

#[derive(Clone, Debug)]
pub struct FdHessian {
    pub hessian: DMatrix<f64>,
    /// Exact number of function evaluations.
    pub evaluations: usize,
    pub steps: Vec<f64>,
}

/// Function evaluations used by [`fd_hessian`] for n parameters.
pub fn fd_evaluations(n: usize, richardson: bool) -> usize {
    if richardson {
        6 * n * n + 1
    } else {
        2 * n * n + 1
    }
}

pub fn default_steps(theta: &ParameterVector, step: Option<f64>) -> Vec<f64> {
    theta
        .as_slice()
        .iter()
        .map(|t| step.unwrap_or(1e-4 * (1.0 + t.abs())))
        .collect()
}

/// Central-difference Hessian of `f` at `θ̂`: `(f₊ − 2f₀ + f₋)/h²` on the
/// diagonal, the four-point cross stencil off it, symmetrized.
/// Stencil points are evaluated in parallel.
pub fn fd_hessian<F>(f: F, theta_hat: &ParameterVector, opts: &FdOptions) -> Result<FdHessian>
where
    F: Fn(&ParameterVector) -> Result<f64> + Sync,
{
    let n = theta_hat.len();
    let steps = default_steps(theta_hat, opts.step);
    if steps.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let counter = AtomicUsize::new(0);
    let eval = |delta: &[f64]| -> Result<f64> {
        counter.fetch_add(1, Ordering::Relaxed);
        let mut v = theta_hat.as_slice().to_vec();
        for (x, d) in v.iter_mut().zip(delta) {
            *x += d;
        }
        let p = ParameterVector::new(v)?;
        let y = f(&p)?;
        if !y.is_finite() {
            return Err(Error::NonFiniteValue(p.as_slice().to_vec()));
        }
        Ok(y)
    };
    let f0 = eval(&vec![0.0; n])?;
    let levels = if opts.richardson { 3 } else { 1 };
    let mut tables = Vec::with_capacity(levels);
    for level in 0..levels {
        let scale = 0.5f64.powi(level as i32);
        let h: Vec<f64> = steps.iter().map(|s| s * scale).collect();
        tables.push(central(&eval, f0, &h)?);
    }
    let hessian = if opts.richardson {
        richardson(tables)
    } else {
        tables.pop().expect("one level")
    };
    Ok(FdHessian {
        hessian: (&hessian + hessian.transpose()) * 0.5,
        evaluations: counter.load(Ordering::Relaxed),
        steps,
    })
}

fn central<E>(eval: &E, f0: f64, h: &[f64]) -> Result<DMatrix<f64>>
where
    E: Fn(&[f64]) -> Result<f64> + Sync,
{
    let n = h.len();
    // (i, j, si, sj): diagonal points have i == j and sj == 0
    let mut points = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for s in [1.0, -1.0] {
            points.push((i, i, s, 0.0));
        }
        for j in i + 1..n {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points.push((i, j, si, sj));
            }
        }
    }
    let values: Vec<f64> = points
        .par_iter()
        .map(|&(i, j, si, sj)| {
            let mut d = vec![0.0; n];
            d[i] += si * h[i];
            d[j] += sj * h[j];
            eval(&d)
        })
        .collect::<Result<_>>()?;
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        m[(i, i)] = (values[k] - 2.0 * f0 + values[k + 1]) / (h[i] * h[i]);
        k += 2;
        for j in i + 1..n {
            let v = (values[k] - values[k + 1] - values[k + 2] + values[k + 3]) / (4.0 * h[i] * h[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
            k += 4;
        }
    }
    Ok(m)
}

/// Eliminates the h² and h⁴ error terms from three halving levels.
fn richardson(levels: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    let mut t = levels;
    for m in 1..t.len() {
        let w = 4f64.powi(m as i32);
        t = t
            .windows(2)
            .map(|p| (&p[1] * w - &p[0]) / (w - 1.0))
            .collect();
    }
    t.pop().expect("nonempty")
}
