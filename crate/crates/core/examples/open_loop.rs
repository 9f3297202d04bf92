//! Step response of an affine two-parameter model, with and without
//! seeded output noise.

use mpc_appset::model::{
    eval_matrices, matrix_jacobian, simulate_open_loop, AffineModel, IndexEntry, MatrixId, NoiseSpec,
    ParameterVector, StateSpace,
};
use nalgebra::{DMatrix, DVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // x(t+1) = θ₂ x(t) + u(t), y(t) = θ₁ x(t)
    let base = StateSpace {
        a: DMatrix::zeros(1, 1),
        b: DMatrix::from_element(1, 1, 1.0),
        c: DMatrix::zeros(1, 1),
    };
    let entry = |param, matrix| IndexEntry { param, matrix, row: 0, col: 0, coefficient: 1.0 };
    let model = AffineModel::from_index_map(base, 2, &[entry(0, MatrixId::C), entry(1, MatrixId::A)])?;
    let theta = ParameterVector::new(vec![0.6, 0.9])?;

    let ss = eval_matrices(&model, &theta)?;
    println!("A = {}, B = {}, C = {}, stable: {}", ss.a[(0, 0)], ss.b[(0, 0)], ss.c[(0, 0)], ss.is_stable());
    let d = matrix_jacobian(&model, &theta, 1)?;
    println!("dA/dtheta_2 = {}", d.a[(0, 0)]);

    let u = vec![DVector::from_element(1, 1.0); 30];
    let clean = simulate_open_loop(&model, &theta, &DVector::zeros(1), &u, &NoiseSpec::none())?;
    let noisy = simulate_open_loop(&model, &theta, &DVector::zeros(1), &u, &NoiseSpec::new(0.001, 2)?)?;
    println!("{:>3} {:>10} {:>10}", "t", "y", "y_meas");
    for (t, (y, ym)) in clean.iter().zip(&noisy).enumerate().step_by(3) {
        println!("{:>3} {:>10.5} {:>10.5}", t, y[0], ym[0]);
    }
    // steady state θ₁ / (1 − θ₂) = 6
    println!("final y = {:.4}", clean.last().unwrap()[0]);
    Ok(())
}
