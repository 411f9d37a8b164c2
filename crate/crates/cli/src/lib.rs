//! Experiment runner behind the `smrlab` binary.

pub mod config;
pub mod experiments;
pub mod output;

pub use config::{ConfigError, ExperimentConfig, Kind};
pub use experiments::{run_kind, Outcome, RunError, Table};
pub use output::{run_file, RunReport};
