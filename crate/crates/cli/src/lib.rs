//! Experiment runner for `sgdlab-core`: TOML experiment configs, a parallel
//! executor that writes CSV/JSON bundles, invariant suites and SVG reports.

pub mod analysis;
pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod svg;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use runner::{run_experiment, write_bundle, ExperimentResult, Mode};
