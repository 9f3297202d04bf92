#![allow(dead_code)]

use std::f64::consts::PI;

use mpc_appset::appset::Ellipsoid;
use mpc_appset::experiment::{self, Experiment};
use mpc_appset::model::ParameterVector;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn example1() -> Experiment {
    experiment::example1().build().unwrap()
}

pub fn example2() -> Experiment {
    experiment::example2().build().unwrap()
}

pub fn rotation(a: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()])
}

/// A random 2-D shape with eigenvalues in [0.2, 5].
pub fn random_shape(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let r = rotation(rng.random_range(0.0..PI));
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![rng.random_range(0.2..5.0), rng.random_range(0.2..5.0)]));
    &r * d * r.transpose()
}

/// Concentric pair where the outer one is a perturbed, rescaled copy of the
/// inner one, so both outcomes of the containment test occur.
pub fn concentric_pair(rng: &mut ChaCha8Rng, center: &ParameterVector) -> (Ellipsoid, Ellipsoid) {
    let inner_shape = random_shape(rng);
    let r = rotation(rng.random_range(-0.3..0.3));
    let outer_shape = &r * &inner_shape * r.transpose() * rng.random_range(0.5..1.2);
    let inner = Ellipsoid::new(center.clone(), inner_shape, rng.random_range(0.5..1.5)).unwrap();
    let outer = Ellipsoid::new(center.clone(), outer_shape, rng.random_range(0.5..1.5)).unwrap();
    (outer, inner)
}

/// Samples `points` boundary points of a 2-D `inner` and checks each lies in `outer`.
pub fn boundary_contained(outer: &Ellipsoid, inner: &Ellipsoid, points: usize) -> bool {
    // boundary: center + √c L⁻ᵀ u for unit u, with P = L Lᵀ
    let chol = inner.shape.clone().cholesky().expect("inner shape positive definite");
    let lt_inv = chol.l().transpose().try_inverse().unwrap();
    (0..points).all(|k| {
        let a = 2.0 * PI * k as f64 / points as f64;
        let d = &lt_inv * DVector::from_vec(vec![a.cos(), a.sin()]) * inner.level.sqrt();
        d.dot(&(&outer.shape * &d)) <= outer.level * (1.0 + 1e-9)
    })
}
