//! Receding-horizon MPC on the first preset: output tracking of a square
//! wave under input and output bounds.

use mpc_appset::experiment;
use mpc_appset::model::NoiseSpec;
use mpc_appset::mpc::QpMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let exp = experiment::example1().build()?;
    let th = &exp.theta_hat;
    let traj = exp.setup.simulate(th, th, &NoiseSpec::none(), false, QpMode::Solve)?;

    println!("{:>4} {:>6} {:>9} {:>9} {:>7} {:>5}", "t", "r", "y", "u", "active", "iters");
    for s in traj.steps.iter().step_by(4) {
        println!(
            "{:>4} {:>6.2} {:>9.4} {:>9.4} {:>7} {:>5}",
            s.t,
            exp.setup.config.reference.at(s.t)[0],
            s.y[0],
            s.u[0],
            s.active.bitmask_hex(),
            s.iterations
        );
    }
    let saturated = traj.steps.iter().filter(|s| s.u[0].abs() >= 1.0 - 1e-9).count();
    let changes = traj.steps.windows(2).filter(|w| w[0].active != w[1].active).count();
    println!("{} steps, {saturated} with saturated input, {changes} active-set changes", traj.len());
    Ok(())
}
