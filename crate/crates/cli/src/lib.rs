//! Command-line driver: data generation, training, evaluation, single-sample
//! prediction, attention dumps and the gradient self-check.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
