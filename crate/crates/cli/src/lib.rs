//! Experiment driver: configuration, run directories and subcommands.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod inputs;

pub use config::{Config, Dataset, Method, Task};
pub use error::{CliError, CliResult};
