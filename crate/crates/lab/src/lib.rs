//! Experiment harness around `icq-core`: JSON experiment configs, a parallel
//! seed sweep runner with CSV output, randomized property suites, and SVG plots.

pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod plot;
pub mod runner;
pub mod verify;

pub use config::{DatasetSource, EnvSpec, ExperimentConfig};
pub use error::LabError;
pub use runner::{run_experiment, ExperimentReport, RunOutcome};
pub use verify::{run_suite, Suite, SuiteReport};
