//! Finite-difference Hessian of the application cost against the
//! one-simulation perturbation Hessian, with simulation counts.

use mpc_appset::experiment::{self, compare_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for richardson in [false, true] {
        let mut cfg = experiment::example1();
        cfg.fd.richardson = richardson;
        let (c, timing) = compare_experiment(&cfg.build()?)?;
        println!("richardson = {richardson}");
        println!("  perturbation H = {:?}", c.hessian_perturbation);
        println!("  fd H           = {:?}", c.hessian_fd);
        println!("  spectral relative difference {:.2e}", c.spectral_rel_diff);
        println!(
            "  simulations: {} vs {} (ratio {:.1}); {:.3} s vs {:.3} s",
            c.simulations_perturbation, c.simulations_fd, c.simulation_ratio, timing.perturbation_seconds, timing.fd_seconds
        );
    }
    Ok(())
}
