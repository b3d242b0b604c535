//! Command-line front end: dataset construction, training, sampling with
//! consensus, and evaluation.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::{run, Cli, Command};
pub use config::{CliConfig, DatasetConfig, EnhanceConfig, EnhanceMode};
pub use error::{Category, CliError};
