//! One MPC step solved twice: by the inequality QP solver, then as an
//! equality problem with the optimal active set frozen.

use mpc_appset::experiment;
use mpc_appset::model::eval_matrices;
use mpc_appset::mpc::{condense_matrices, solve_inequality_qp, solve_kkt, KktSystem};
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let exp = experiment::example1().build()?;
    let ss = eval_matrices(exp.setup.model.as_ref(), &exp.theta_hat)?;

    for (x, u_prev, t) in [(-1.6, -0.2, 1), (0.0, 0.0, 1), (2.5, 1.0, 25)] {
        let qp = condense_matrices(&ss, &exp.setup.config, &DVector::from_element(1, x), &DVector::from_element(1, u_prev), t)?;
        let sol = solve_inequality_qp(&qp)?;
        let kkt = KktSystem::from_active_set(&qp, &sol.active)?;
        let frozen = solve_kkt(&kkt)?;
        println!(
            "x = {x:5.2}, u_prev = {u_prev:5.2}, t = {t:3}: {} active rows {:?}, {} iterations",
            sol.active.len(),
            sol.active.rows(),
            sol.iterations
        );
        println!(
            "  u*(1) = {:.6}, cost = {:.6}, max |X_qp - X_kkt| = {:.2e}, KKT residual = {:.2e}",
            qp.layout.first_input(&sol.x)[0],
            qp.cost(&sol.x),
            (&sol.x - &frozen.x).amax(),
            frozen.residual
        );
    }
    Ok(())
}
