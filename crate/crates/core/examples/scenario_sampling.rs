//! Uniform scenarios around the estimate, each checked against the true
//! application cost and against the ellipsoid.

use mpc_appset::experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(400);
    let mut cfg = experiment::example1();
    if let Some(s) = cfg.scenario.as_mut() {
        s.samples = samples;
    }
    let exp = cfg.build()?;
    let a = exp.analyze()?;
    let st = a.stats.expect("preset has a scenario block");
    println!("gamma = {}, {} samples ({} unstable plants)", a.gamma, st.samples, st.unstable);
    println!("accepted: {} ({} inside the ellipsoid, {:.1}%)", st.accepted, st.true_accepts, 100.0 * st.inside_fraction);
    println!("false accepts: {}, false rejects: {}, accuracy {:.1}%", st.false_accepts, st.false_rejects, 100.0 * st.accuracy);
    println!("closed-loop simulations: {} for the Hessian, {} for scenarios", a.simulations_perturbation, a.simulations_scenario);

    let set = a.scenarios.unwrap();
    let mut out = Vec::new();
    set.write_csv(&mut out, a.gamma, Some(&a.ellipsoid))?;
    for line in String::from_utf8(out)?.lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
