//! Experiment harness for channel gating networks: configuration files,
//! dataset ingestion and the `cg` subcommands.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use commands::{
    calibrate_offset, cmd_analyze, cmd_eval, cmd_perf, cmd_train, configure_threads, load_checkpoint, GateOptions,
    RunOptions,
};
pub use config::{ExperimentConfig, Precision, CONFIG_SCHEMA};
pub use error::{CliError, Result};
