//! Quadratic approximation of the application cost and the ellipsoid it
//! defines for a given accuracy γ.

use mpc_appset::appset::{application_ellipsoid, perturbation_hessian, AppCostEvaluator};
use mpc_appset::experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let exp = experiment::example1().build()?;
    let th = &exp.theta_hat;
    let h = perturbation_hessian(&exp.setup, th, exp.cost.m, 1)?.hessian;
    println!("H = {h:.4}");

    let e = application_ellipsoid(&h, exp.cost.gamma, th)?;
    println!("level 2/gamma = {:.3e}", e.level);
    for (k, ax) in e.semi_axes().iter().enumerate() {
        println!("semi-axis {k}: length {:?}, direction {:?}", ax.length, ax.direction);
    }

    // walk out along the longest axis and compare the true cost with the
    // quadratic model
    let ev = AppCostEvaluator::new(&exp.setup, th, exp.cost.m)?;
    let ax = &e.semi_axes()[0];
    let len = ax.length.unwrap_or(0.0);
    println!("{:>6} {:>12} {:>12} {:>8}", "s", "V", "quadratic", "inside");
    for s in [0.25, 0.5, 1.0, 1.5, 2.0] {
        let dir = nalgebra::DVector::from_vec(ax.direction.clone());
        let theta = th.offset(&dir, s * len)?;
        let d = theta.as_vector() - th.as_vector();
        println!(
            "{s:>6.2} {:>12.4e} {:>12.4e} {:>8}",
            ev.cost(&theta)?,
            0.5 * d.dot(&(&h * &d)),
            e.contains_point(&theta)?
        );
    }
    Ok(())
}
