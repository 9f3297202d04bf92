//! End-to-end pipelines and their on-disk outputs.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{rows, Experiment, ExperimentConfig};
use crate::appset::{
    application_ellipsoid, contains, identification_ellipsoid, perturbation_hessian, spectral_rel_diff,
    tracking_cost, AppCostEvaluator, Ellipsoid, EllipsoidJson, GammaMode, PerturbationHessian,
};
use crate::error::{Error, Result};
use crate::scenario::{
    fd_hessian, sample_scenarios, scenario_constraints, ClassificationStats, FdHessian, ScenarioConstraints,
    ScenarioSet,
};

/// In-memory results of [`Experiment::analyze`].
#[derive(Clone, Debug)]
pub struct Analysis {
    pub gamma: f64,
    pub tracking_cost: f64,
    pub perturbation: PerturbationHessian,
    pub ellipsoid: Ellipsoid,
    pub identification: Option<Ellipsoid>,
    /// `E_SI ⊆ E_app`.
    pub contained: Option<bool>,
    pub scenarios: Option<ScenarioSet>,
    pub stats: Option<ClassificationStats>,
    pub constraints: Option<ScenarioConstraints>,
    pub simulations_perturbation: usize,
    pub simulations_scenario: usize,
}

impl Experiment {
    /// Nominal run → sensitivities → Hessian → ellipsoid → (identification
    /// ellipsoid) → (scenarios and classification).
    pub fn analyze(&self) -> Result<Analysis> {
        let setup = &self.setup;
        let m = self.cost.m;
        let start = setup.counter.get();
        let perturbation = perturbation_hessian(setup, &self.theta_hat, m, self.order)?;
        let simulations_perturbation = setup.counter.get() - start;

        let tracking = tracking_cost(&perturbation.trajectory, &setup.config.reference, m)
            .map_err(|e| e.in_stage("gamma"))?;
        let gamma = self.cost.resolve_gamma(tracking).map_err(|e| e.in_stage("gamma"))?;
        let ellipsoid = application_ellipsoid(&perturbation.hessian, gamma, &self.theta_hat)
            .map_err(|e| e.in_stage("ellipsoid"))?;

        let identification = match &self.fisher {
            Some(fi) => Some(identification_ellipsoid(fi, &self.theta_hat).map_err(|e| e.in_stage("identification"))?),
            None => None,
        };
        let contained = match &identification {
            Some(id) => Some(contains(&ellipsoid, id).map_err(|e| e.in_stage("identification"))?),
            None => None,
        };

        let (mut scenarios, mut stats, mut constraints) = (None, None, None);
        let before = setup.counter.get();
        if let Some((bounds, n_k, seed)) = self.scenario.as_ref().filter(|s| s.1 > 0) {
            let ev = AppCostEvaluator::from_trajectory(setup, &self.theta_hat, &perturbation.trajectory, m)
                .map_err(|e| e.in_stage("scenario"))?;
            let set = sample_scenarios(bounds, *n_k, *seed, &ev).map_err(|e| e.in_stage("scenario"))?;
            stats = Some(set.classify(gamma, &ellipsoid).map_err(|e| e.in_stage("scenario"))?);
            if let Some(fi) = &self.fisher {
                constraints =
                    Some(scenario_constraints(&set, gamma, fi, &self.theta_hat).map_err(|e| e.in_stage("scenario"))?);
            }
            scenarios = Some(set);
        }
        let simulations_scenario = setup.counter.get() - before;

        Ok(Analysis {
            gamma,
            tracking_cost: tracking,
            perturbation,
            ellipsoid,
            identification,
            contained,
            scenarios,
            stats,
            constraints,
            simulations_perturbation,
            simulations_scenario,
        })
    }

    /// Finite-difference Hessian of the application cost. Its simulation
    /// count includes the nominal run.
    pub fn fd_hessian(&self) -> Result<(FdHessian, usize)> {
        let start = self.setup.counter.get();
        let ev = AppCostEvaluator::new(&self.setup, &self.theta_hat, self.cost.m)?;
        let fd = fd_hessian(|t| ev.cost(t), &self.theta_hat, &self.fd)?;
        Ok((fd, self.setup.counter.get() - start))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub n_params: usize,
    pub theta_hat: Vec<f64>,
    pub steps: usize,
    pub m: usize,
    pub gamma_mode: GammaMode,
    pub gamma: f64,
    pub tracking_cost: f64,
    pub sensitivity_order: usize,
    pub hessian: Vec<Vec<f64>>,
    pub ellipsoid_level: f64,
    pub degenerate_steps: usize,
    pub sensitivity_warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification: Option<IdentificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioReport>,
    pub simulations: SimulationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub level: f64,
    pub degenerate: bool,
    pub contained_in_application_set: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    #[serde(flatten)]
    pub stats: ClassificationStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nontrivial_constraints: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub perturbation: usize,
    pub scenario: usize,
}

impl Analysis {
    pub fn report(&self, exp: &Experiment) -> RunReport {
        let bundle = &self.perturbation.bundle;
        RunReport {
            name: exp.name.clone(),
            n_params: exp.theta_hat.len(),
            theta_hat: exp.theta_hat.as_slice().to_vec(),
            steps: exp.setup.horizon,
            m: exp.cost.m,
            gamma_mode: exp.cost.gamma_mode,
            gamma: self.gamma,
            tracking_cost: self.tracking_cost,
            sensitivity_order: exp.order,
            hessian: rows(&self.perturbation.hessian),
            ellipsoid_level: self.ellipsoid.level,
            degenerate_steps: bundle.degenerate_steps().len(),
            sensitivity_warnings: bundle.warnings.clone(),
            identification: self.identification.as_ref().map(|id| IdentificationReport {
                level: id.level,
                degenerate: id.is_degenerate(),
                contained_in_application_set: self.contained.unwrap_or(false),
            }),
            scenario: self.stats.map(|stats| ScenarioReport {
                seed: self.scenarios.as_ref().map_or(0, |s| s.seed),
                stats,
                nontrivial_constraints: self
                    .constraints
                    .as_ref()
                    .map(|c| c.constraints.iter().filter(|k| k.accepted && !k.trivial).count()),
            }),
            simulations: SimulationReport {
                perturbation: self.simulations_perturbation,
                scenario: self.simulations_scenario,
            },
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Runs the full pipeline and writes `trajectory.csv`, `sensitivity.csv`,
/// `ellipsoid.json`, `report.json` and, when configured,
/// `identification.json`, `samples.csv` and `scenario_constraints.json`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let exp = config.build()?;
    let analysis = exp.analyze()?;
    write_outputs(&exp, &analysis, out_dir).map_err(|e| e.in_stage("output"))?;
    Ok(analysis.report(&exp))
}

pub fn write_outputs(exp: &Experiment, a: &Analysis, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_trajectory_csv(exp, a, &out_dir.join("trajectory.csv"))?;
    crate::sensitivity::write_diagnostics_csv(&a.perturbation.bundle, std::fs::File::create(out_dir.join("sensitivity.csv"))?)?;
    let app: EllipsoidJson = a.ellipsoid.to_json();
    write_json(&out_dir.join("ellipsoid.json"), &app)?;
    if let Some(id) = &a.identification {
        write_json(&out_dir.join("identification.json"), &id.to_json())?;
    }
    if let Some(set) = &a.scenarios {
        set.write_csv_file(&out_dir.join("samples.csv"), a.gamma, Some(&a.ellipsoid))?;
    }
    if let Some(c) = &a.constraints {
        write_json(&out_dir.join("scenario_constraints.json"), c)?;
    }
    write_json(&out_dir.join("report.json"), &a.report(exp))?;
    Ok(())
}

/// Columns: `t`, `r_*`, `y_*`, `y_meas_*` (output plus the configured
/// noise), `u_*`, `x_*`, `active` (hex row mask), `degenerate`.
fn write_trajectory_csv(exp: &Experiment, a: &Analysis, path: &Path) -> Result<()> {
    let traj = &a.perturbation.trajectory;
    let dims = exp.setup.model.dims();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    for (p, n) in [("r", dims.n_y), ("y", dims.n_y), ("y_meas", dims.n_y), ("u", dims.n_u), ("x", dims.n_x)] {
        header.extend((1..=n).map(|i| format!("{p}_{i}")));
    }
    header.extend(["active", "degenerate"].map(String::from));
    w.write_record(&header)?;
    let mut noise = exp.noise.sampler();
    let fmt = |v: &nalgebra::DVector<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    for (k, s) in traj.steps.iter().enumerate() {
        let mut row = vec![s.t.to_string()];
        row.extend(fmt(&exp.setup.config.reference.at(s.t)));
        row.extend(fmt(&s.y));
        row.extend(fmt(&(&s.y + noise.draw(dims.n_y))));
        row.extend(fmt(&s.u));
        row.extend(fmt(&s.x));
        row.push(s.active.bitmask_hex());
        row.push((a.perturbation.bundle.steps[k].degenerate as u8).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub n_params: usize,
    pub hessian_perturbation: Vec<Vec<f64>>,
    pub hessian_fd: Vec<Vec<f64>>,
    /// `‖H_pert − H_fd‖₂ / ‖H_fd‖₂`.
    pub spectral_rel_diff: f64,
    pub simulations_perturbation: usize,
    pub simulations_fd: usize,
    pub simulation_ratio: f64,
    pub fd_evaluations: usize,
    pub fd_richardson: bool,
    pub fd_steps: Vec<f64>,
    pub degenerate_steps: usize,
}

/// Wall-clock seconds; machine dependent, kept out of the report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub perturbation_seconds: f64,
    pub fd_seconds: f64,
}

pub fn compare_methods(config: &ExperimentConfig) -> Result<(ComparisonReport, Timing)> {
    let exp = config.build()?;
    compare_experiment(&exp)
}

pub fn compare_experiment(exp: &Experiment) -> Result<(ComparisonReport, Timing)> {
    let setup = &exp.setup;
    let t0 = Instant::now();
    let c0 = setup.counter.get();
    let p = perturbation_hessian(setup, &exp.theta_hat, exp.cost.m, exp.order)?;
    let sims_p = setup.counter.get() - c0;
    let t_p = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (fd, sims_fd) = exp.fd_hessian().map_err(|e| e.in_stage("fd"))?;
    let t_fd = t1.elapsed().as_secs_f64();
    if sims_p == 0 {
        return Err(Error::InvalidArgument("perturbation path ran no simulation".into()));
    }
    Ok((
        ComparisonReport {
            name: exp.name.clone(),
            n_params: exp.theta_hat.len(),
            hessian_perturbation: rows(&p.hessian),
            hessian_fd: rows(&fd.hessian),
            spectral_rel_diff: spectral_rel_diff(&p.hessian, &fd.hessian),
            simulations_perturbation: sims_p,
            simulations_fd: sims_fd,
            simulation_ratio: sims_fd as f64 / sims_p as f64,
            fd_evaluations: fd.evaluations,
            fd_richardson: exp.fd.richardson,
            fd_steps: fd.steps,
            degenerate_steps: p.bundle.degenerate_steps().len(),
        },
        Timing {
            perturbation_seconds: t_p,
            fd_seconds: t_fd,
        },
    ))
}

pub fn write_comparison(report: &ComparisonReport, timing: &Timing, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("comparison.json"), report)?;
    write_json(&out_dir.join("timing.json"), timing)
}
