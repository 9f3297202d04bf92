//! Frozen-active-set route: with the active rows turned into equalities the
//! MPC problem becomes `min (ΥX − ℋ)ᵀ𝒬(ΥX − ℋ)  s.t.  𝒜X = ℬ`, solved
//! through its stacked KKT system `Ψ [X; λ] = Λ`.

use nalgebra::{DMatrix, DVector, SVD};

use super::condense::{CondensedQp, QpDerivative};
use super::qp::ActiveSet;
use crate::error::{Error, Result};

/// `𝒜 = [𝒞; Ξ_a]`, `ℬ = [𝒟; ρ]`.
#[derive(Clone, Debug)]
pub struct ActiveSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Inequality rows stacked under `𝒞`, in order.
    pub rows: Vec<usize>,
}

pub fn assemble_active_system(qp: &CondensedQp, active: &ActiveSet) -> Result<ActiveSystem> {
    let n_rows = qp.g_ineq.nrows();
    if active.flags.len() != n_rows {
        return Err(Error::dim(format!(
            "active set has {} flags, QP has {} inequality rows",
            active.flags.len(),
            n_rows
        )));
    }
    let rows = active.rows();
    if let Some(&r) = rows.iter().find(|&&r| active.flags[qp.layout.opposite_row(r)]) {
        return Err(Error::InvalidArgument(format!(
            "rows {r} and {} bound the same scalar from both sides",
            qp.layout.opposite_row(r)
        )));
    }
    let (ne, xd) = (qp.ccal.nrows(), qp.x_dim());
    let mut a = DMatrix::zeros(ne + rows.len(), xd);
    let mut b = DVector::zeros(ne + rows.len());
    a.view_mut((0, 0), (ne, xd)).copy_from(&qp.ccal);
    b.rows_mut(0, ne).copy_from(&qp.dcal);
    for (k, &r) in rows.iter().enumerate() {
        a.row_mut(ne + k).copy_from(&qp.g_ineq.row(r));
        b[ne + k] = qp.h_ineq[r];
    }
    Ok(ActiveSystem { a, b, rows })
}

/// `Ψ = [[2ΥᵀQΥ, 𝒜ᵀ], [𝒜, 0]]`, `Λ = [2ΥᵀQℋ; ℬ]`.
#[derive(Clone, Debug)]
pub struct KktSystem {
    pub psi: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub x_dim: usize,
}

impl KktSystem {
    pub fn new(qp: &CondensedQp, sys: &ActiveSystem) -> Self {
        let xd = qp.x_dim();
        let m = sys.a.nrows();
        let mut psi = DMatrix::zeros(xd + m, xd + m);
        psi.view_mut((0, 0), (xd, xd)).copy_from(&qp.hessian());
        psi.view_mut((0, xd), (xd, m)).copy_from(&sys.a.transpose());
        psi.view_mut((xd, 0), (m, xd)).copy_from(&sys.a);
        let mut lambda = DVector::zeros(xd + m);
        lambda.rows_mut(0, xd).copy_from(&qp.linear_rhs());
        lambda.rows_mut(xd, m).copy_from(&sys.b);
        Self { psi, lambda, x_dim: xd }
    }

    pub fn from_active_set(qp: &CondensedQp, active: &ActiveSet) -> Result<Self> {
        Ok(Self::new(qp, &assemble_active_system(qp, active)?))
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn factor(&self) -> KktFactor {
        KktFactor::new(&self.psi)
    }

    /// `(∂Ψ, ∂Λ)` along a data derivative `d`, for the same active rows.
    pub fn derivative(qp: &CondensedQp, rows: &[usize], d: &QpDerivative) -> (DMatrix<f64>, DVector<f64>) {
        let xd = qp.x_dim();
        let ne = qp.ccal.nrows();
        let m = ne + rows.len();
        let uq = qp.upsilon.transpose() * &qp.qcal;
        let duq = d.upsilon.transpose() * &qp.qcal;
        let top = (&duq * &qp.upsilon + &uq * &d.upsilon) * 2.0;
        let mut da = DMatrix::zeros(m, xd);
        da.view_mut((0, 0), (ne, xd)).copy_from(&d.ccal);
        for (k, &r) in rows.iter().enumerate() {
            da.row_mut(ne + k).copy_from(&d.g_ineq.row(r));
        }
        let mut dpsi = DMatrix::zeros(xd + m, xd + m);
        dpsi.view_mut((0, 0), (xd, xd)).copy_from(&top);
        dpsi.view_mut((0, xd), (xd, m)).copy_from(&da.transpose());
        dpsi.view_mut((xd, 0), (m, xd)).copy_from(&da);
        let mut dl = DVector::zeros(xd + m);
        dl.rows_mut(0, xd)
            .copy_from(&((&duq * &qp.hcal + &uq * &d.hcal) * 2.0));
        dl.rows_mut(xd, ne).copy_from(&d.dcal);
        (dpsi, dl)
    }

    /// Product-rule terms of the second derivative that come from the
    /// quadratic dependence of `ΥᵀQΥ` and `ΥᵀQℋ` on the data:
    /// `2(∂ᵢΥᵀQ∂ⱼΥ + ∂ⱼΥᵀQ∂ᵢΥ)` and `2(∂ᵢΥᵀQ∂ⱼℋ + ∂ⱼΥᵀQ∂ᵢℋ)`.
    pub fn cross_terms(qp: &CondensedQp, m: usize, di: &QpDerivative, dj: &QpDerivative) -> (DMatrix<f64>, DVector<f64>) {
        let xd = qp.x_dim();
        let qi = di.upsilon.transpose() * &qp.qcal;
        let qj = dj.upsilon.transpose() * &qp.qcal;
        let top = (&qi * &dj.upsilon + &qj * &di.upsilon) * 2.0;
        let mut psi = DMatrix::zeros(xd + m, xd + m);
        psi.view_mut((0, 0), (xd, xd)).copy_from(&top);
        let mut lam = DVector::zeros(xd + m);
        lam.rows_mut(0, xd).copy_from(&((&qi * &dj.hcal + &qj * &di.hcal) * 2.0));
        (psi, lam)
    }
}

/// Rank-revealing factorization of `Ψ` giving minimum-norm least-squares
/// solutions; reused for every right-hand side at one step.
#[derive(Clone, Debug)]
pub struct KktFactor {
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    psi: DMatrix<f64>,
    cutoff: f64,
}

impl KktFactor {
    pub fn new(psi: &DMatrix<f64>) -> Self {
        let svd = psi.clone().svd(true, true);
        let smax = svd.singular_values.max();
        Self {
            svd,
            psi: psi.clone(),
            cutoff: 1e-12 * smax.max(f64::MIN_POSITIVE),
        }
    }

    pub fn rank(&self) -> usize {
        self.svd.singular_values.iter().filter(|s| **s > self.cutoff).count()
    }

    /// Minimum-norm solution of `Ψz = rhs` and its residual norm.
    /// Fails when the residual exceeds `1e-8·(1 + ‖rhs‖)`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let (z, residual) = self.solve_unchecked(rhs);
        if !(residual <= 1e-8 * (1.0 + rhs.norm())) {
            return Err(Error::SingularSystem { residual });
        }
        Ok((z, residual))
    }

    /// Like [`KktFactor::solve`] but returns the least-squares solution
    /// whatever the residual.
    pub fn solve_unchecked(&self, rhs: &DVector<f64>) -> (DVector<f64>, f64) {
        // both U and Vᵀ were requested, so the SVD solve cannot fail
        let z = self.svd.solve(rhs, self.cutoff).expect("SVD computed with U and V");
        let residual = (&self.psi * &z - rhs).norm();
        (z, residual)
    }
}

#[derive(Clone, Debug)]
pub struct KktSolution {
    pub x: DVector<f64>,
    /// `[λ_eq; λ_active]`, ordered as the rows of `𝒜`.
    pub multipliers: DVector<f64>,
    pub residual: f64,
}

impl KktSolution {
    pub fn stacked(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.x.len() + self.multipliers.len());
        z.rows_mut(0, self.x.len()).copy_from(&self.x);
        z.rows_mut(self.x.len(), self.multipliers.len()).copy_from(&self.multipliers);
        z
    }
}

pub fn solve_kkt(kkt: &KktSystem) -> Result<KktSolution> {
    solve_kkt_factored(kkt, &kkt.factor())
}

pub(crate) fn solve_kkt_factored(kkt: &KktSystem, factor: &KktFactor) -> Result<KktSolution> {
    let (z, residual) = factor.solve(&kkt.lambda)?;
    let xd = kkt.x_dim;
    Ok(KktSolution {
        x: z.rows(0, xd).into_owned(),
        multipliers: z.rows(xd, z.len() - xd).into_owned(),
        residual,
    })
}
