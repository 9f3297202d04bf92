//! Closed-loop output sensitivities from one nominal run, checked by
//! predicting the response to a small parameter change.

use mpc_appset::appset::perturbation_hessian;
use mpc_appset::experiment;
use mpc_appset::model::NoiseSpec;
use mpc_appset::mpc::QpMode;
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = experiment::example1();
    cfg.sensitivity.order = 2;
    let exp = cfg.build()?;
    let th = &exp.theta_hat;
    let p = perturbation_hessian(&exp.setup, th, exp.cost.m, 2)?;
    let b = &p.bundle;
    println!("{} steps, {} degenerate", b.len(), b.degenerate_steps().len());

    println!("{:>4} {:>10} {:>10}", "t", "dy/dth1", "dy/dth2");
    for t in (0..b.len()).step_by(10) {
        println!("{:>4} {:>10.4} {:>10.4}", t + 1, b.dy[t][(0, 0)], b.dy[t][(0, 1)]);
    }

    let delta = DVector::from_vec(vec![0.003, -0.002]);
    let nominal = p.trajectory.outputs();
    let predicted = b.predict_outputs(&nominal, &delta)?;
    let actual = exp
        .setup
        .simulate(&th.offset(&delta, 1.0)?, th, &NoiseSpec::none(), false, QpMode::Solve)?
        .outputs();
    let err = |a: &[DVector<f64>]| a.iter().zip(&actual).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
    println!("max |y(theta_hat + delta) - y|: unchanged {:.3e}, Taylor {:.3e}", err(&nominal), err(&predicted));

    let mut csv = Vec::new();
    mpc_appset::sensitivity::write_diagnostics_csv(b, &mut csv)?;
    println!("diagnostics header: {}", String::from_utf8(csv)?.lines().next().unwrap_or(""));
    Ok(())
}
