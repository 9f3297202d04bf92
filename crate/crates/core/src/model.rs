//! Parametrized discrete-time LTI models.
//!
//! A model maps a parameter vector θ to a state-space triple
//! `(A(θ), B(θ), C(θ))` and exposes first and second parameter derivatives
//! of that triple. The derivative interface is what the perturbation
//! analysis consumes; nothing downstream differentiates numerically.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model parameters θ. Always non-empty and finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(DVector<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "parameter vector must have at least one entry".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParameter(i));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        Self::new(v.as_slice().to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// `self + scale * delta`.
    pub fn offset(&self, delta: &DVector<f64>, scale: f64) -> Result<Self> {
        if delta.len() != self.len() {
            return Err(Error::ParameterShape {
                expected: self.len(),
                got: delta.len(),
            });
        }
        Self::from_vector(&self.0 + delta * scale)
    }

    /// `self + h * e_i`.
    pub fn perturbed(&self, i: usize, h: f64) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                n: self.len(),
            });
        }
        let mut v = self.0.clone();
        v[i] += h;
        Self::from_vector(v)
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0.as_slice().to_vec()
    }
}

/// A state-space triple. Also used for derivative triples.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl StateSpace {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            a: DMatrix::zeros(dims.n_x, dims.n_x),
            b: DMatrix::zeros(dims.n_x, dims.n_u),
            c: DMatrix::zeros(dims.n_y, dims.n_x),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n_x: self.a.nrows(),
            n_u: self.b.ncols(),
            n_y: self.c.nrows(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(self.b.iter()).chain(self.c.iter()).all(|v| *v == 0.0)
    }

    fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).chain(self.c.iter()).all(|v| v.is_finite())
    }

    /// Largest eigenvalue modulus of `A`.
    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }
}

/// State, input and output dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParametrizationKind {
    Affine,
    General,
}

/// A smooth map θ ↦ (A, B, C) with derivatives.
///
/// Implementors may assume `theta` has length `n_params()`; the checked
/// entry points are [`eval_matrices`], [`matrix_jacobian`] and
/// [`matrix_hessian`].
pub trait ParametrizedModel: Send + Sync + fmt::Debug {
    fn dims(&self) -> Dims;
    fn n_params(&self) -> usize;
    fn kind(&self) -> ParametrizationKind;
    fn matrices(&self, theta: &DVector<f64>) -> StateSpace;
    /// ∂(A, B, C)/∂θᵢ.
    fn jacobian(&self, theta: &DVector<f64>, i: usize) -> StateSpace;
    /// ∂²(A, B, C)/∂θᵢ∂θⱼ.
    fn hessian(&self, theta: &DVector<f64>, i: usize, j: usize) -> StateSpace;
}

fn check_theta(model: &dyn ParametrizedModel, theta: &ParameterVector) -> Result<()> {
    if theta.len() != model.n_params() {
        return Err(Error::ParameterShape {
            expected: model.n_params(),
            got: theta.len(),
        });
    }
    Ok(())
}

fn check_index(model: &dyn ParametrizedModel, i: usize) -> Result<()> {
    if i >= model.n_params() {
        return Err(Error::IndexOutOfRange {
            index: i,
            n: model.n_params(),
        });
    }
    Ok(())
}

pub fn eval_matrices(model: &dyn ParametrizedModel, theta: &ParameterVector) -> Result<StateSpace> {
    check_theta(model, theta)?;
    let ss = model.matrices(theta.as_vector());
    if ss.dims() != model.dims() {
        return Err(Error::dim("model returned matrices of the wrong size"));
    }
    if !ss.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "model matrices are not finite at theta={:?}",
            theta.as_slice()
        )));
    }
    Ok(ss)
}

pub fn matrix_jacobian(
    model: &dyn ParametrizedModel,
    theta: &ParameterVector,
    i: usize,
) -> Result<StateSpace> {
    check_theta(model, theta)?;
    check_index(model, i)?;
    Ok(model.jacobian(theta.as_vector(), i))
}

pub fn matrix_hessian(
    model: &dyn ParametrizedModel,
    theta: &ParameterVector,
    i: usize,
    j: usize,
) -> Result<StateSpace> {
    check_theta(model, theta)?;
    check_index(model, i)?;
    check_index(model, j)?;
    Ok(model.hessian(theta.as_vector(), i, j))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixId {
    A,
    B,
    C,
}

/// One entry of an affine index map: `coefficient * θ[param]` is added to
/// `matrix[row, col]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub param: usize,
    pub matrix: MatrixId,
    pub row: usize,
    pub col: usize,
    #[serde(default = "one")]
    pub coefficient: f64,
}

fn one() -> f64 {
    1.0
}

/// `(A, B, C)(θ) = base + Σᵢ θᵢ · termᵢ`.
#[derive(Clone, Debug)]
pub struct AffineModel {
    base: StateSpace,
    terms: Vec<StateSpace>,
}

impl AffineModel {
    pub fn new(base: StateSpace, terms: Vec<StateSpace>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("affine model needs at least one parameter".into()));
        }
        let dims = base.dims();
        if dims.n_x == 0 || dims.n_u == 0 || dims.n_y == 0 {
            return Err(Error::dim("model dimensions must be positive"));
        }
        if base.c.ncols() != dims.n_x || base.b.nrows() != dims.n_x || base.a.ncols() != dims.n_x {
            return Err(Error::dim("inconsistent base matrices"));
        }
        if terms.iter().any(|t| t.dims() != dims) {
            return Err(Error::dim("affine term dimensions differ from base"));
        }
        Ok(Self { base, terms })
    }

    /// Builds the model from fixed base matrices plus entries that each
    /// place one parameter into one matrix slot.
    pub fn from_index_map(base: StateSpace, n_params: usize, entries: &[IndexEntry]) -> Result<Self> {
        let dims = base.dims();
        let mut terms = vec![StateSpace::zeros(dims); n_params];
        for e in entries {
            if e.param >= n_params {
                return Err(Error::IndexOutOfRange {
                    index: e.param,
                    n: n_params,
                });
            }
            let m = match e.matrix {
                MatrixId::A => &mut terms[e.param].a,
                MatrixId::B => &mut terms[e.param].b,
                MatrixId::C => &mut terms[e.param].c,
            };
            if e.row >= m.nrows() || e.col >= m.ncols() {
                return Err(Error::dim(format!(
                    "index entry ({:?}, {}, {}) outside a {}x{} matrix",
                    e.matrix,
                    e.row,
                    e.col,
                    m.nrows(),
                    m.ncols()
                )));
            }
            m[(e.row, e.col)] += e.coefficient;
        }
        Self::new(base, terms)
    }
}

impl ParametrizedModel for AffineModel {
    fn dims(&self) -> Dims {
        self.base.dims()
    }

    fn n_params(&self) -> usize {
        self.terms.len()
    }

    fn kind(&self) -> ParametrizationKind {
        ParametrizationKind::Affine
    }

    fn matrices(&self, theta: &DVector<f64>) -> StateSpace {
        let mut ss = self.base.clone();
        for (t, &th) in self.terms.iter().zip(theta.iter()) {
            ss.a += &t.a * th;
            ss.b += &t.b * th;
            ss.c += &t.c * th;
        }
        ss
    }

    fn jacobian(&self, _theta: &DVector<f64>, i: usize) -> StateSpace {
        self.terms[i].clone()
    }

    fn hessian(&self, _theta: &DVector<f64>, _i: usize, _j: usize) -> StateSpace {
        StateSpace::zeros(self.dims())
    }
}

type EvalFn = dyn Fn(&DVector<f64>) -> StateSpace + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>, usize) -> StateSpace + Send + Sync;
type HessFn = dyn Fn(&DVector<f64>, usize, usize) -> StateSpace + Send + Sync;

/// A general smooth parametrization given by closures.
pub struct FnModel {
    dims: Dims,
    n_params: usize,
    eval: Box<EvalFn>,
    jac: Box<JacFn>,
    hess: Box<HessFn>,
}

impl FnModel {
    pub fn new(
        dims: Dims,
        n_params: usize,
        eval: impl Fn(&DVector<f64>) -> StateSpace + Send + Sync + 'static,
        jac: impl Fn(&DVector<f64>, usize) -> StateSpace + Send + Sync + 'static,
        hess: impl Fn(&DVector<f64>, usize, usize) -> StateSpace + Send + Sync + 'static,
    ) -> Self {
        Self {
            dims,
            n_params,
            eval: Box::new(eval),
            jac: Box::new(jac),
            hess: Box::new(hess),
        }
    }
}

impl fmt::Debug for FnModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnModel")
            .field("dims", &self.dims)
            .field("n_params", &self.n_params)
            .finish_non_exhaustive()
    }
}

impl ParametrizedModel for FnModel {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn kind(&self) -> ParametrizationKind {
        ParametrizationKind::General
    }
    fn matrices(&self, theta: &DVector<f64>) -> StateSpace {
        (self.eval)(theta)
    }
    fn jacobian(&self, theta: &DVector<f64>, i: usize) -> StateSpace {
        (self.jac)(theta, i)
    }
    fn hessian(&self, theta: &DVector<f64>, i: usize, j: usize) -> StateSpace {
        (self.hess)(theta, i, j)
    }
}

/// Augments a model with a constant disturbance on each output:
/// state `[x; d]`, `A = [[A, 0], [0, I]]`, `B = [B; 0]`, `C = [C, I]`.
#[derive(Clone, Debug)]
pub struct OutputDisturbanceModel {
    inner: Arc<dyn ParametrizedModel>,
}

impl OutputDisturbanceModel {
    pub fn new(inner: Arc<dyn ParametrizedModel>) -> Self {
        Self { inner }
    }

    pub fn inner(&self) -> &Arc<dyn ParametrizedModel> {
        &self.inner
    }

    fn augment(&self, ss: StateSpace, identity: bool) -> StateSpace {
        let Dims { n_x, n_u, n_y } = self.inner.dims();
        let mut a = DMatrix::zeros(n_x + n_y, n_x + n_y);
        a.view_mut((0, 0), (n_x, n_x)).copy_from(&ss.a);
        let mut b = DMatrix::zeros(n_x + n_y, n_u);
        b.view_mut((0, 0), (n_x, n_u)).copy_from(&ss.b);
        let mut c = DMatrix::zeros(n_y, n_x + n_y);
        c.view_mut((0, 0), (n_y, n_x)).copy_from(&ss.c);
        if identity {
            for k in 0..n_y {
                a[(n_x + k, n_x + k)] = 1.0;
                c[(k, n_x + k)] = 1.0;
            }
        }
        StateSpace { a, b, c }
    }
}

impl ParametrizedModel for OutputDisturbanceModel {
    fn dims(&self) -> Dims {
        let d = self.inner.dims();
        Dims {
            n_x: d.n_x + d.n_y,
            ..d
        }
    }
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn kind(&self) -> ParametrizationKind {
        self.inner.kind()
    }
    fn matrices(&self, theta: &DVector<f64>) -> StateSpace {
        self.augment(self.inner.matrices(theta), true)
    }
    fn jacobian(&self, theta: &DVector<f64>, i: usize) -> StateSpace {
        self.augment(self.inner.jacobian(theta, i), false)
    }
    fn hessian(&self, theta: &DVector<f64>, i: usize, j: usize) -> StateSpace {
        self.augment(self.inner.hessian(theta, i, j), false)
    }
}

/// White additive output noise, per-channel variance, seeded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            variance: 0.0,
            seed: 0,
        }
    }

    pub fn new(variance: f64, seed: u64) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be finite and >= 0, got {variance}"
            )));
        }
        Ok(Self { variance, seed })
    }

    pub fn is_silent(&self) -> bool {
        self.variance == 0.0
    }

    /// A fresh sampler; the same spec always yields the same draw sequence.
    pub fn sampler(&self) -> NoiseSampler {
        NoiseSampler {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            normal: (self.variance > 0.0)
                .then(|| Normal::new(0.0, self.variance.sqrt()).expect("finite std dev")),
        }
    }
}

pub struct NoiseSampler {
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
}

impl NoiseSampler {
    pub fn draw(&mut self, n: usize) -> DVector<f64> {
        match &self.normal {
            Some(d) => DVector::from_fn(n, |_, _| d.sample(&mut self.rng)),
            None => DVector::zeros(n),
        }
    }
}

/// Simulates `x(t+1) = A x(t) + B u(t)`, `y(t) = C x(t) + e(t)` from `x0`
/// and returns one output per input sample.
pub fn simulate_open_loop(
    model: &dyn ParametrizedModel,
    theta: &ParameterVector,
    x0: &DVector<f64>,
    u_seq: &[DVector<f64>],
    noise: &NoiseSpec,
) -> Result<Vec<DVector<f64>>> {
    let ss = eval_matrices(model, theta)?;
    let dims = model.dims();
    if u_seq.is_empty() {
        return Err(Error::InvalidArgument("input sequence is empty".into()));
    }
    if x0.len() != dims.n_x {
        return Err(Error::dim(format!("x0 has length {}, expected {}", x0.len(), dims.n_x)));
    }
    if let Some(u) = u_seq.iter().find(|u| u.len() != dims.n_u) {
        return Err(Error::dim(format!("input of length {}, expected {}", u.len(), dims.n_u)));
    }
    let mut sampler = noise.sampler();
    let mut x = x0.clone();
    let mut ys = Vec::with_capacity(u_seq.len());
    for u in u_seq {
        ys.push(&ss.c * &x + sampler.draw(dims.n_y));
        x = &ss.a * &x + &ss.b * u;
    }
    Ok(ys)
}
