//! Batch front-end: training runs, evaluation, ablation suites, gradient
//! checks and synthetic dataset emission.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod report;
pub mod runner;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
