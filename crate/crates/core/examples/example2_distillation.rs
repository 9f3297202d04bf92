//! The two-input, two-output preset with output-disturbance integral action
//! and measurement noise. Writes the full output set to a directory.

use std::path::PathBuf;

use mpc_appset::experiment::{self, run_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("example2"));
    let report = run_experiment(&experiment::example2(), &out)?;
    println!("gamma = 100 / V = {:.4e} (V = {:.4e})", report.gamma, report.tracking_cost);
    println!("degenerate steps: {}", report.degenerate_steps);
    if let Some(s) = &report.scenario {
        let st = &s.stats;
        println!(
            "{} of {} scenarios acceptable, {} classified correctly inside, {} false accepts, accuracy {:.0}%",
            st.accepted,
            st.samples,
            st.true_accepts,
            st.false_accepts,
            100.0 * st.accuracy
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}
