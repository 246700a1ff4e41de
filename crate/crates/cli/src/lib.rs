//! Configuration, checkpoints and subcommands of the `lgd` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::Checkpoint;
pub use config::{ConfigFile, Experiment};
pub use error::{CliError, CliResult};
