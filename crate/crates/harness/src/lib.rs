//! Experiment harness: configuration, subcommands and report output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod report;

pub use commands::run;
pub use config::{ExperimentConfig, Task};
pub use error::{HarnessError, Result};
pub use report::{CommandResult, RunReport, SCHEMA_VERSION};
