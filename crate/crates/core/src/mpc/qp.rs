//! Inequality-constrained solve of the condensed QP.
//!
//! The dynamics `𝒞X = 𝒟` are eliminated first: the state columns of `𝒞`
//! form a unit block-triangular (hence invertible) matrix, so
//! `X = X_p + Z v` with `v` the stacked inputs. The reduced problem
//! `min ½vᵀHv + gᵀv  s.t.  (GZ)v ≤ h − GX_p` has `H ≻ 0` whenever `R ≻ 0`,
//! and is solved by the Goldfarb–Idnani dual active-set method, which needs
//! no feasible starting point. Before that, the previous step's active set
//! is tried as a warm start: if its equality-constrained solution is
//! primal feasible with nonnegative multipliers it is optimal as is.

use nalgebra::{DMatrix, DVector};

use super::condense::CondensedQp;
use crate::error::{Error, Result};

/// Which inequality rows hold with equality at the solution.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActiveSet {
    pub flags: Vec<bool>,
}

impl ActiveSet {
    pub fn empty(n_rows: usize) -> Self {
        Self {
            flags: vec![false; n_rows],
        }
    }

    pub fn from_rows(n_rows: usize, rows: &[usize]) -> Self {
        let mut s = Self::empty(n_rows);
        for &r in rows {
            s.flags[r] = true;
        }
        s
    }

    pub fn rows(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row `i` is bit `i`; printed most significant nibble first.
    pub fn bitmask_hex(&self) -> String {
        let nibbles = self.flags.len().div_ceil(4).max(1);
        (0..nibbles)
            .rev()
            .map(|k| {
                let v = (0..4).fold(0u32, |acc, b| {
                    let i = 4 * k + b;
                    acc | (u32::from(*self.flags.get(i).unwrap_or(&false)) << b)
                });
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct QpOptions {
    /// Defaults to `50 · X_dim`.
    pub max_iterations: Option<usize>,
    pub warm_start: Option<ActiveSet>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub active: ActiveSet,
    /// Multipliers of the rows of `𝒞`.
    pub eq_multipliers: DVector<f64>,
    /// Multipliers of the rows of `G`; zero on inactive rows.
    pub ineq_multipliers: DVector<f64>,
    pub iterations: usize,
    pub warm_started: bool,
}

/// Activity tolerance on `|GᵢX − hᵢ|`.
pub(crate) fn activity_tol(h: f64) -> f64 {
    1e-8 * (1.0 + h.abs())
}

const FEAS_TOL: f64 = 1e-10;

struct Reduced {
    xp: DVector<f64>,
    z: DMatrix<f64>,
    hess_inv: DMatrix<f64>,
    grad: DVector<f64>,
    /// Rows `(GZ)ⱼ`.
    gz: DMatrix<f64>,
    /// `h − GX_p`.
    slack0: DVector<f64>,
    row_norm: Vec<f64>,
    cx: DMatrix<f64>,
}

impl Reduced {
    fn new(qp: &CondensedQp) -> Result<Self> {
        let ns = qp.layout.n_state_cols();
        let xd = qp.x_dim();
        let nv = xd - ns;
        let cx = qp.ccal.columns(0, ns).into_owned();
        let cu = qp.ccal.columns(ns, nv).into_owned();
        let cx_lu = cx.clone().lu();
        let x_state = cx_lu
            .solve(&qp.dcal)
            .ok_or_else(|| Error::dim("state block of the dynamics matrix is singular"))?;
        let zx = -cx_lu
            .solve(&cu)
            .ok_or_else(|| Error::dim("state block of the dynamics matrix is singular"))?;
        let mut xp = DVector::zeros(xd);
        xp.rows_mut(0, ns).copy_from(&x_state);
        let mut z = DMatrix::zeros(xd, nv);
        z.view_mut((0, 0), (ns, nv)).copy_from(&zx);
        z.view_mut((ns, 0), (nv, nv)).fill_with_identity();

        let uz = &qp.upsilon * &z;
        let hess = uz.transpose() * &qp.qcal * &uz * 2.0;
        let hess = (&hess + hess.transpose()) * 0.5;
        let hess_inv = hess
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("reduced QP Hessian is not positive definite".into()))?
            .inverse();
        let grad = uz.transpose() * (&qp.qcal * (&qp.upsilon * &xp - &qp.hcal)) * 2.0;
        let gz = &qp.g_ineq * &z;
        let slack0 = &qp.h_ineq - &qp.g_ineq * &xp;
        let row_norm = (0..gz.nrows()).map(|j| gz.row(j).norm()).collect();
        Ok(Self {
            xp,
            z,
            hess_inv,
            grad,
            gz,
            slack0,
            row_norm,
            cx,
        })
    }

    /// `h − GX` for the reduced point `v`.
    fn slack(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.slack0 - &self.gz * v
    }

    fn feas_tol(&self, j: usize) -> f64 {
        FEAS_TOL * (1.0 + self.slack0[j].abs())
    }

    /// Normal of row `j` in Goldfarb–Idnani form `nᵀv ≥ b`.
    fn normal(&self, j: usize) -> DVector<f64> {
        -self.gz.row(j).transpose()
    }

    /// Equality-constrained minimizer with rows `w` held at their bounds.
    /// Returns `None` if the rows are linearly dependent.
    fn solve_working(&self, w: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
        let v0 = -(&self.hess_inv * &self.grad);
        if w.is_empty() {
            return Some((v0, DVector::zeros(0)));
        }
        let n = DMatrix::from_columns(&w.iter().map(|&j| self.normal(j)).collect::<Vec<_>>());
        let hn = &self.hess_inv * &n;
        let m = n.transpose() * &hn;
        let m = (&m + m.transpose()) * 0.5;
        let chol = m.cholesky()?;
        // nᵀv = b with b = −slack0
        let b = DVector::from_iterator(w.len(), w.iter().map(|&j| -self.slack0[j]));
        let mu = chol.solve(&(b - n.transpose() * &v0));
        Some((v0 + hn * &mu, mu))
    }
}

/// Solves the condensed QP with its inequality constraints.
pub fn solve_inequality_qp(qp: &CondensedQp) -> Result<QpSolution> {
    solve_inequality_qp_with(qp, &QpOptions::default())
}

pub fn solve_inequality_qp_with(qp: &CondensedQp, opts: &QpOptions) -> Result<QpSolution> {
    let red = Reduced::new(qp)?;
    let n_rows = qp.g_ineq.nrows();
    let max_iter = opts.max_iterations.unwrap_or(50 * qp.x_dim());

    // Rows without a reduced normal are fixed by the dynamics (outputs at
    // the current, already measured state); they are either satisfied or
    // make the problem infeasible.
    let fixed_violations: Vec<usize> = (0..n_rows)
        .filter(|&j| red.row_norm[j] <= 1e-14 && red.slack0[j] < -red.feas_tol(j))
        .collect();
    if !fixed_violations.is_empty() {
        return Err(Error::Infeasible {
            rows: fixed_violations,
        });
    }

    let warm = opts.warm_start.as_ref().and_then(|ws| {
        if ws.flags.len() != n_rows {
            return None;
        }
        let w: Vec<usize> = ws.rows().into_iter().filter(|&j| red.row_norm[j] > 1e-14).collect();
        let (v, mu) = red.solve_working(&w)?;
        let slack = red.slack(&v);
        let feasible = (0..n_rows).all(|j| slack[j] >= -red.feas_tol(j));
        let dual_ok = mu.iter().all(|&m| m >= -1e-10);
        (feasible && dual_ok).then_some((v, w, mu))
    });

    let (v, working, mu, iterations, warm_started) = match warm {
        Some((v, w, mu)) => (v, w, mu, 1, true),
        None => {
            let (v, w, mu, it) = goldfarb_idnani(&red, max_iter)?;
            (v, w, mu, it, false)
        }
    };

    let x = &red.xp + &red.z * &v;
    let slack = qp.slack(&x);
    let mut active = ActiveSet::empty(n_rows);
    for j in 0..n_rows {
        if slack[j].abs() <= activity_tol(qp.h_ineq[j]) {
            active.flags[j] = true;
        }
    }
    let mut ineq_multipliers = DVector::zeros(n_rows);
    for (k, &j) in working.iter().enumerate() {
        ineq_multipliers[j] = mu[k].max(0.0);
        active.flags[j] = true;
    }
    // Equality multipliers from the state block of stationarity:
    // 𝒞ₓᵀλ = −(∇J + Gᵀμ)ₓ.
    let ns = qp.layout.n_state_cols();
    let resid = qp.gradient(&x) + qp.g_ineq.transpose() * &ineq_multipliers;
    let rhs = -resid.rows(0, ns).into_owned();
    let eq_multipliers = red
        .cx
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::dim("state block of the dynamics matrix is singular"))?;

    Ok(QpSolution {
        x,
        active,
        eq_multipliers,
        ineq_multipliers,
        iterations,
        warm_started,
    })
}

type GiResult = (DVector<f64>, Vec<usize>, DVector<f64>, usize);

fn goldfarb_idnani(red: &Reduced, max_iter: usize) -> Result<GiResult> {
    let n_rows = red.gz.nrows();
    let mut v = -(&red.hess_inv * &red.grad);
    let mut working: Vec<usize> = Vec::new();
    let mut mu: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    loop {
        // Most violated row, normalized by its reduced normal.
        let slack = red.slack(&v);
        let p = (0..n_rows)
            .filter(|j| !working.contains(j) && red.row_norm[*j] > 1e-14)
            .filter(|&j| slack[j] < -red.feas_tol(j))
            .min_by(|&a, &b| {
                let va = slack[a] / red.row_norm[a];
                let vb = slack[b] / red.row_norm[b];
                va.total_cmp(&vb).then(a.cmp(&b))
            });
        let Some(p) = p else {
            return Ok((v, working, DVector::from_vec(mu), iterations.max(1)));
        };
        let np = red.normal(p);
        let mut mu_p = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::Convergence {
                    iterations: max_iter,
                });
            }
            let hinv_np = &red.hess_inv * &np;
            // Primal step z and dual step r for the current working set.
            let (z, r) = if working.is_empty() {
                (hinv_np.clone(), DVector::zeros(0))
            } else {
                let n = DMatrix::from_columns(&working.iter().map(|&j| red.normal(j)).collect::<Vec<_>>());
                let hn = &red.hess_inv * &n;
                let m = n.transpose() * &hn;
                let m = (&m + m.transpose()) * 0.5;
                let r = m
                    .cholesky()
                    .map(|c| c.solve(&(hn.transpose() * &np)))
                    .ok_or_else(|| Error::dim("working set became linearly dependent"))?;
                (&hinv_np - hn * &r, r)
            };

            // Partial step: first working multiplier to hit zero.
            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 1e-12 {
                    let ratio = mu[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_k = Some(k);
                    }
                }
            }
            // Full step: makes row p active.
            let znp = z.dot(&np);
            let s_p = red.slack(&v)[p];
            let t2 = if z.norm() > 1e-12 * (1.0 + hinv_np.norm()) && znp > 0.0 {
                (-s_p / znp).max(0.0)
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                let slack = red.slack(&v);
                let rows = (0..n_rows).filter(|&j| slack[j] < -red.feas_tol(j)).collect();
                return Err(Error::Infeasible { rows });
            }
            if t2.is_infinite() {
                for (k, m) in mu.iter_mut().enumerate() {
                    *m -= t1 * r[k];
                }
                mu_p += t1;
                let k = drop_k.expect("finite t1 has an index");
                working.remove(k);
                mu.remove(k);
                continue;
            }
            let t = t1.min(t2);
            v += &z * t;
            for (k, m) in mu.iter_mut().enumerate() {
                *m -= t * r[k];
            }
            mu_p += t;
            if t2 <= t1 {
                working.push(p);
                mu.push(mu_p);
                break;
            }
            let k = drop_k.expect("finite t1 has an index");
            working.remove(k);
            mu.remove(k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_matrices, ParameterVector};
    use crate::mpc::{condense_matrices, Reference};
    use crate::test_support::{example1_config, example1_model};

    #[test]
    fn bitmask_hex_layout() {
        let s = ActiveSet::from_rows(22, &[0, 5, 21]);
        assert_eq!(s.bitmask_hex(), "200021");
        assert_eq!(ActiveSet::empty(3).bitmask_hex(), "0");
    }

    #[test]
    fn inactive_case_matches_unconstrained_kkt() {
        let m = example1_model();
        let ss = eval_matrices(&m, &ParameterVector::new(vec![0.6, 0.9]).unwrap()).unwrap();
        let mut cfg = example1_config();
        cfg.reference = Reference::Constant(DVector::from_element(1, 0.1));
        let qp = condense_matrices(&ss, &cfg, &DVector::from_element(1, 0.05), &DVector::zeros(1), 1).unwrap();
        let sol = solve_inequality_qp(&qp).unwrap();
        assert!(sol.active.is_empty());
        // unconstrained: [2ΥᵀQΥ 𝒞ᵀ; 𝒞 0][X; λ] = [2ΥᵀQℋ; 𝒟]
        let (xd, ne) = (qp.x_dim(), qp.ccal.nrows());
        let mut k = DMatrix::zeros(xd + ne, xd + ne);
        k.view_mut((0, 0), (xd, xd)).copy_from(&qp.hessian());
        k.view_mut((0, xd), (xd, ne)).copy_from(&qp.ccal.transpose());
        k.view_mut((xd, 0), (ne, xd)).copy_from(&qp.ccal);
        let mut rhs = DVector::zeros(xd + ne);
        rhs.rows_mut(0, xd).copy_from(&qp.linear_rhs());
        rhs.rows_mut(xd, ne).copy_from(&qp.dcal);
        let z = k.lu().solve(&rhs).unwrap();
        assert!((sol.x - z.rows(0, xd)).amax() < 1e-10);
    }

    #[test]
    fn large_reference_saturates_input() {
        let m = example1_model();
        let ss = eval_matrices(&m, &ParameterVector::new(vec![0.6, 0.9]).unwrap()).unwrap();
        let mut cfg = example1_config();
        cfg.reference = Reference::Constant(DVector::from_element(1, 10.0));
        cfg.y_max = DVector::from_element(1, 100.0);
        cfg.y_min = DVector::from_element(1, -100.0);
        let qp = condense_matrices(&ss, &cfg, &DVector::zeros(1), &DVector::zeros(1), 1).unwrap();
        let sol = solve_inequality_qp(&qp).unwrap();
        let u_max_row = 2 * 6; // first u_max row bounds u(N)
        assert!(sol.active.rows().iter().any(|&r| (u_max_row..u_max_row + 5).contains(&r)));
        assert!((qp.layout.first_input(&sol.x)[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_measured_output_reported() {
        let m = example1_model();
        let ss = eval_matrices(&m, &ParameterVector::new(vec![0.6, 0.9]).unwrap()).unwrap();
        // y(1) = 0.6·5 = 3 > y_max = 2, fixed by the measured state
        let qp = condense_matrices(&ss, &example1_config(), &DVector::from_element(1, 5.0), &DVector::zeros(1), 1).unwrap();
        match solve_inequality_qp(&qp) {
            Err(Error::Infeasible { rows }) => assert!(rows.contains(&qp.layout.yrow(1))),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_reuses_a_correct_active_set() {
        let m = example1_model();
        let ss = eval_matrices(&m, &ParameterVector::new(vec![0.6, 0.9]).unwrap()).unwrap();
        let mut cfg = example1_config();
        cfg.reference = Reference::Constant(DVector::from_element(1, 1.8));
        let qp = condense_matrices(&ss, &cfg, &DVector::zeros(1), &DVector::zeros(1), 1).unwrap();
        let cold = solve_inequality_qp(&qp).unwrap();
        assert!(!cold.active.is_empty());
        let warm = solve_inequality_qp_with(
            &qp,
            &QpOptions {
                warm_start: Some(cold.active.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(warm.warm_started);
        assert!((warm.x - &cold.x).amax() < 1e-10);
        // a wrong warm start falls back to the cold path
        let wrong = ActiveSet::from_rows(qp.g_ineq.nrows(), &[qp.g_ineq.nrows() - 1]);
        let fallback = solve_inequality_qp_with(
            &qp,
            &QpOptions {
                warm_start: Some(wrong),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!fallback.warm_started);
        assert!((fallback.x - cold.x).amax() < 1e-10);
    }
}
