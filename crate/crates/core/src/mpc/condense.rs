//! Condensing the MPC problem over the stacked vector
//! `X = [x(N+1); ...; x(1); u(N); ...; u(1)]`.
//!
//! Cost: `J = (ΥX − ℋ)ᵀ 𝒬 (ΥX − ℋ)`; dynamics: `𝒞X = 𝒟`; bounds: `GX ≤ h`
//! with `G` stacking `[I⊗C 0; −I⊗C 0; 0 I; 0 −I]`.
//!
//! Every block of the problem data is linear in `(A, B, C, x*(t), u*(t−1))`
//! apart from constant identity/reference/bound parts, so a parameter
//! derivative of the data is the same assembly applied to the derivative
//! triple with the constant parts dropped ([`QpLayout::derivative`]).

use nalgebra::{DMatrix, DVector};

use super::MpcConfig;
use crate::error::{Error, Result};
use crate::model::{eval_matrices, Dims, ParameterVector, ParametrizedModel, StateSpace};

/// Index arithmetic for the stacked problem with horizon `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QpLayout {
    pub horizon: usize,
    pub dims: Dims,
}

impl QpLayout {
    pub fn new(horizon: usize, dims: Dims) -> Self {
        Self { horizon, dims }
    }

    pub fn x_dim(&self) -> usize {
        (self.horizon + 1) * self.dims.n_x + self.horizon * self.dims.n_u
    }

    pub fn n_state_cols(&self) -> usize {
        (self.horizon + 1) * self.dims.n_x
    }

    /// Column of `x(j)`, j = 1..=N+1.
    pub fn xcol(&self, j: usize) -> usize {
        (self.horizon + 1 - j) * self.dims.n_x
    }

    /// Column of `u(j)`, j = 1..=N.
    pub fn ucol(&self, j: usize) -> usize {
        self.n_state_cols() + (self.horizon - j) * self.dims.n_u
    }

    /// Row of `Υ` / `ℋ` holding `y(j)`, j = 1..=N+1.
    pub fn yrow(&self, j: usize) -> usize {
        (self.horizon + 1 - j) * self.dims.n_y
    }

    /// Row of `Υ` / `ℋ` holding `Δu(j)`, j = 1..=N.
    pub fn durow(&self, j: usize) -> usize {
        (self.horizon + 1) * self.dims.n_y + (self.horizon - j) * self.dims.n_u
    }

    pub fn n_cost_rows(&self) -> usize {
        (self.horizon + 1) * self.dims.n_y + self.horizon * self.dims.n_u
    }

    pub fn n_eq_rows(&self) -> usize {
        (self.horizon + 1) * self.dims.n_x
    }

    /// Rows of `𝒞` encoding `x(j+1) = A x(j) + B u(j)`, j = 1..=N.
    pub fn dyn_row(&self, j: usize) -> usize {
        (self.horizon - j) * self.dims.n_x
    }

    /// Rows of `𝒞` pinning `x(1)`.
    pub fn init_row(&self) -> usize {
        self.horizon * self.dims.n_x
    }

    pub fn n_ineq_rows(&self) -> usize {
        2 * (self.horizon + 1) * self.dims.n_y + 2 * self.horizon * self.dims.n_u
    }

    fn y_rows(&self) -> usize {
        (self.horizon + 1) * self.dims.n_y
    }

    fn u_rows(&self) -> usize {
        self.horizon * self.dims.n_u
    }

    /// The row bounding the same scalar from the other side.
    pub fn opposite_row(&self, row: usize) -> usize {
        let (yr, ur) = (self.y_rows(), self.u_rows());
        if row < yr {
            row + yr
        } else if row < 2 * yr {
            row - yr
        } else if row < 2 * yr + ur {
            row + ur
        } else {
            row - ur
        }
    }

    /// True for rows of `G` bounding outputs (the rows that depend on `C`).
    pub fn is_output_row(&self, row: usize) -> bool {
        row < 2 * self.y_rows()
    }

    /// Extracts `u(1)` from a stacked vector.
    pub fn first_input(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(self.ucol(1), self.dims.n_u).into_owned()
    }

    pub fn state(&self, x: &DVector<f64>, j: usize) -> DVector<f64> {
        x.rows(self.xcol(j), self.dims.n_x).into_owned()
    }

    pub fn input(&self, x: &DVector<f64>, j: usize) -> DVector<f64> {
        x.rows(self.ucol(j), self.dims.n_u).into_owned()
    }

    /// Derivative of the problem data along a direction in which the model
    /// matrices move by `d`, the measured state by `dx_now` and the previous
    /// input by `du_prev`. Bounds, weights and reference are fixed.
    pub fn derivative(&self, d: &StateSpace, dx_now: &DVector<f64>, du_prev: &DVector<f64>) -> QpDerivative {
        let (n, nx, nu, ny) = (self.horizon, self.dims.n_x, self.dims.n_u, self.dims.n_y);
        let xd = self.x_dim();
        let mut upsilon = DMatrix::zeros(self.n_cost_rows(), xd);
        let mut g = DMatrix::zeros(self.n_ineq_rows(), xd);
        for j in 1..=n + 1 {
            upsilon.view_mut((self.yrow(j), self.xcol(j)), (ny, nx)).copy_from(&d.c);
            g.view_mut((self.yrow(j), self.xcol(j)), (ny, nx)).copy_from(&d.c);
            g.view_mut((self.y_rows() + self.yrow(j), self.xcol(j)), (ny, nx))
                .copy_from(&(-&d.c));
        }
        let mut hcal = DVector::zeros(self.n_cost_rows());
        hcal.rows_mut(self.durow(1), nu).copy_from(du_prev);
        let mut ccal = DMatrix::zeros(self.n_eq_rows(), xd);
        for j in 1..=n {
            let r = self.dyn_row(j);
            ccal.view_mut((r, self.xcol(j)), (nx, nx)).copy_from(&(-&d.a));
            ccal.view_mut((r, self.ucol(j)), (nx, nu)).copy_from(&(-&d.b));
        }
        let mut dcal = DVector::zeros(self.n_eq_rows());
        dcal.rows_mut(self.init_row(), nx).copy_from(dx_now);
        QpDerivative {
            upsilon,
            hcal,
            ccal,
            dcal,
            g_ineq: g,
        }
    }
}

/// The condensed QP at one time step.
#[derive(Clone, Debug)]
pub struct CondensedQp {
    pub layout: QpLayout,
    pub upsilon: DMatrix<f64>,
    pub qcal: DMatrix<f64>,
    pub hcal: DVector<f64>,
    pub ccal: DMatrix<f64>,
    pub dcal: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
}

impl CondensedQp {
    pub fn x_dim(&self) -> usize {
        self.layout.x_dim()
    }

    /// `(ΥX − ℋ)ᵀ 𝒬 (ΥX − ℋ)`.
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        let e = &self.upsilon * x - &self.hcal;
        e.dot(&(&self.qcal * &e))
    }

    /// `2ΥᵀQΥ`, the Hessian of the cost.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.upsilon.transpose() * &self.qcal * &self.upsilon * 2.0
    }

    /// `2ΥᵀQℋ`.
    pub fn linear_rhs(&self) -> DVector<f64> {
        self.upsilon.transpose() * (&self.qcal * &self.hcal) * 2.0
    }

    /// Gradient of the cost at `x`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.upsilon.transpose() * (&self.qcal * (&self.upsilon * x - &self.hcal)) * 2.0
    }

    /// `h − GX`; nonnegative entries are satisfied rows.
    pub fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h_ineq - &self.g_ineq * x
    }
}

/// Parameter derivative of the QP data (`𝒬`, bounds and reference do not
/// depend on θ).
#[derive(Clone, Debug)]
pub struct QpDerivative {
    pub upsilon: DMatrix<f64>,
    pub hcal: DVector<f64>,
    pub ccal: DMatrix<f64>,
    pub dcal: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
}

/// Builds the condensed QP at time `t` for the given model matrices.
pub fn condense_matrices(
    ss: &StateSpace,
    config: &MpcConfig,
    x_now: &DVector<f64>,
    u_prev: &DVector<f64>,
    t: usize,
) -> Result<CondensedQp> {
    let dims = ss.dims();
    config.validate(dims)?;
    if x_now.len() != dims.n_x {
        return Err(Error::dim(format!("x_now has length {}, expected {}", x_now.len(), dims.n_x)));
    }
    if u_prev.len() != dims.n_u {
        return Err(Error::dim(format!("u_prev has length {}, expected {}", u_prev.len(), dims.n_u)));
    }
    let layout = QpLayout::new(config.horizon(), dims);
    let (n, nx, nu, ny) = (layout.horizon, dims.n_x, dims.n_u, dims.n_y);

    let identity_x = DMatrix::<f64>::identity(nx, nx);
    let identity_u = DMatrix::<f64>::identity(nu, nu);
    let mut qp = {
        let d = layout.derivative(ss, x_now, u_prev);
        CondensedQp {
            layout,
            upsilon: d.upsilon,
            qcal: DMatrix::zeros(layout.n_cost_rows(), layout.n_cost_rows()),
            hcal: d.hcal,
            ccal: d.ccal,
            dcal: d.dcal,
            g_ineq: d.g_ineq,
            h_ineq: DVector::zeros(layout.n_ineq_rows()),
        }
    };
    for j in 1..=n {
        qp.ccal
            .view_mut((layout.dyn_row(j), layout.xcol(j + 1)), (nx, nx))
            .copy_from(&identity_x);
    }
    qp.ccal
        .view_mut((layout.init_row(), layout.xcol(1)), (nx, nx))
        .copy_from(&identity_x);
    // Δ block of Υ.
    for j in 1..=n {
        let r = layout.durow(j);
        qp.upsilon.view_mut((r, layout.ucol(j)), (nu, nu)).copy_from(&identity_u);
        if j >= 2 {
            qp.upsilon.view_mut((r, layout.ucol(j - 1)), (nu, nu)).copy_from(&(-&identity_u));
        }
        qp.qcal.view_mut((r, r), (nu, nu)).copy_from(&config.r);
    }
    for j in 1..=n + 1 {
        let r = layout.yrow(j);
        qp.hcal.rows_mut(r, ny).copy_from(&config.reference.at(t + j - 1));
        qp.qcal.view_mut((r, r), (ny, ny)).copy_from(&config.q);
        qp.h_ineq.rows_mut(r, ny).copy_from(&config.y_max);
        qp.h_ineq.rows_mut(layout.y_rows() + r, ny).copy_from(&(-&config.y_min));
    }
    let u0 = 2 * layout.y_rows();
    for j in 1..=n {
        let off = (n - j) * nu;
        let (ru, rl) = (u0 + off, u0 + layout.u_rows() + off);
        qp.g_ineq.view_mut((ru, layout.ucol(j)), (nu, nu)).copy_from(&identity_u);
        qp.g_ineq.view_mut((rl, layout.ucol(j)), (nu, nu)).copy_from(&(-&identity_u));
        qp.h_ineq.rows_mut(ru, nu).copy_from(&config.u_max);
        qp.h_ineq.rows_mut(rl, nu).copy_from(&(-&config.u_min));
    }
    Ok(qp)
}

/// Builds the condensed QP for `model` at `theta`, measured state `x_now`
/// (= x*(t)) and previously applied input `u_prev` (= u*(t−1)).
pub fn condense(
    model: &dyn ParametrizedModel,
    theta: &ParameterVector,
    config: &MpcConfig,
    x_now: &DVector<f64>,
    u_prev: &DVector<f64>,
    t: usize,
) -> Result<CondensedQp> {
    let ss = eval_matrices(model, theta)?;
    condense_matrices(&ss, config, x_now, u_prev, t)
}
