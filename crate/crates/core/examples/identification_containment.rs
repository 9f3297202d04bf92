//! Does the identification confidence ellipsoid fit inside the application
//! ellipsoid? Also prints the sampled experiment-design inequalities.

use mpc_appset::appset::{chi2_quantile, contains, identification_ellipsoid, FisherInfo};
use mpc_appset::experiment;
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let exp = experiment::example1().build()?;
    let a = exp.analyze()?;
    println!("chi2_0.95(2) = {:.5}", chi2_quantile(0.95, 2)?);

    // stretch the experiment until the confidence region fits
    let base = DMatrix::from_row_slice(2, 2, &[160.0, 110.0, 110.0, 100.0]);
    for n in [5, 10, 20, 50, 100] {
        let fi = FisherInfo::new(base.clone(), n, 0.95)?;
        let id = identification_ellipsoid(&fi, &exp.theta_hat)?;
        println!("N = {n:>3}: level {:.4}, inside application set: {}", id.level, contains(&a.ellipsoid, &id)?);
    }

    let c = a.constraints.expect("preset has Fisher information and scenarios");
    let binding: Vec<_> = c.constraints.iter().filter(|k| !k.trivial).collect();
    println!("{} sampled constraints, {} nontrivial; first few:", c.constraints.len(), binding.len());
    for k in binding.iter().take(4) {
        println!("  #{:<3} offset {:?}, Vapp {:.3e}, rhs {:.3e}, accepted {}", k.index, k.offset, k.vapp, k.rhs, k.accepted);
    }
    Ok(())
}
