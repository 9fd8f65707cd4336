//! Regression benchmarks for `kan-core`: targets, datasets, experiment
//! orchestration, CSV reports and property verification.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod report;
pub mod tables;
pub mod verify;

pub use config::{ExperimentConfig, Problem};
pub use error::{BenchError, Result};
pub use experiment::{run_experiment, ExperimentResult, ResultRow};
