//! Ellipsoidal approximation of the MPC application set.
//!
//! One nominal closed-loop simulation with the MPC at θ̂ is differentiated
//! through the KKT system of every step (active sets frozen), giving
//! `∂y(t)/∂θ` and from it the Gauss–Newton Hessian of the application cost.
//! Scenario sampling and a finite-difference Hessian serve as baselines.

// `!(a < b)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appset;
pub mod error;
pub mod experiment;
pub mod model;
pub mod mpc;
pub mod scenario;
pub mod sensitivity;

pub use error::{Error, Result};
