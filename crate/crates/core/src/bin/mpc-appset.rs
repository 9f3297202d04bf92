use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mpc_appset::experiment::{self, ExperimentConfig};
use mpc_appset::Error;

#[derive(Parser)]
#[command(version, about = "Application-set approximation for MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of scenario samples.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Sensitivity order.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    order: Option<u8>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline for a config file.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare the perturbation Hessian with the finite-difference one.
    Compare {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write a built-in config to `<out>/config.toml` and run it.
    Preset {
        name: PresetName,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    Example1,
    Example2,
}

fn apply_overrides(cli: &Cli, cfg: &mut ExperimentConfig) -> Result<(), Error> {
    if let Some(order) = cli.order {
        cfg.sensitivity.order = order as usize;
    }
    if cli.seed.is_some() || cli.samples.is_some() {
        let s = cfg
            .scenario
            .as_mut()
            .ok_or_else(|| Error::Config("--seed/--samples need a [scenario] section".into()))?;
        if let Some(seed) = cli.seed {
            s.seed = seed;
        }
        if let Some(n) = cli.samples {
            s.samples = n;
        }
    }
    Ok(())
}

fn run(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let report = experiment::run_experiment(cfg, out)?;
    println!("{}: gamma = {:.6e}, ellipsoid level = {:.6e}", report.name, report.gamma, report.ellipsoid_level);
    println!("degenerate steps: {}", report.degenerate_steps);
    if let Some(id) = &report.identification {
        println!("identification ellipsoid inside application ellipsoid: {}", id.contained_in_application_set);
    }
    if let Some(s) = &report.scenario {
        let st = &s.stats;
        println!(
            "scenarios: {} samples, {} accepted, {:.1}% of accepted inside, {} false accepts, accuracy {:.1}%",
            st.samples,
            st.accepted,
            100.0 * st.inside_fraction,
            st.false_accepts,
            100.0 * st.accuracy
        );
    }
    println!("outputs written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<(), Error> {
        match &cli.command {
            Command::Run { config, out } => {
                let mut cfg = ExperimentConfig::from_path(config)?;
                apply_overrides(&cli, &mut cfg)?;
                run(&cfg, out)
            }
            Command::Compare { config, out } => {
                let mut cfg = ExperimentConfig::from_path(config)?;
                apply_overrides(&cli, &mut cfg)?;
                let (report, timing) = experiment::compare_methods(&cfg)?;
                experiment::write_comparison(&report, &timing, out)?;
                println!(
                    "hessian spectral relative difference: {:.3e}",
                    report.spectral_rel_diff
                );
                println!(
                    "simulations: perturbation {}, finite difference {} (ratio {:.1})",
                    report.simulations_perturbation, report.simulations_fd, report.simulation_ratio
                );
                println!(
                    "wall time: perturbation {:.3} s, finite difference {:.3} s",
                    timing.perturbation_seconds, timing.fd_seconds
                );
                Ok(())
            }
            Command::Preset { name, out } => {
                let mut cfg = match name {
                    PresetName::Example1 => experiment::example1(),
                    PresetName::Example2 => experiment::example2(),
                };
                apply_overrides(&cli, &mut cfg)?;
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
                run(&cfg, out)
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
