//! Experiment harness around the `fedcollm` library: configuration,
//! run directories, metrics and the communication-cost table.

pub mod commands;
pub mod config;
pub mod metrics;

pub use commands::{cmd_eval, cmd_run, RunOptions};
pub use config::ExperimentConfig;
