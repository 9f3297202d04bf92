//! Config-driven experiments: presets, the analysis pipeline and its
//! output files.

mod config;
mod presets;
mod run;

pub use config::{
    Experiment, ExperimentConfig, FisherSpec, ModelSpec, MpcSpec, ReferenceSpec, ScenarioSpec, SensitivitySpec,
};
pub use presets::{example1, example2, preset, PRESETS};
pub use run::{
    compare_experiment, compare_methods, run_experiment, write_comparison, write_outputs, Analysis,
    ComparisonReport, IdentificationReport, RunReport, ScenarioReport, SimulationReport, Timing,
};
