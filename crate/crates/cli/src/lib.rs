//! Experiment orchestration for `imbalance-core`: TOML configs, seeded
//! trials, CSV/JSON artifacts and their aggregation.

pub mod config;
pub mod error;
pub mod experiments;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::CliError;
pub use runner::{run_experiment, RunRecord};
