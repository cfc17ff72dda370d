//! Experiment configuration and the pipeline stages behind the CLI.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{ExperimentConfig, PriorFit, TaskSpec};
