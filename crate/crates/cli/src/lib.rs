//! Command-line driver: configuration handling and the `simulate`,
//! `estimate`, `elasticity` and `welfare` commands.

pub mod commands;
pub mod config;
mod output;

use std::path::PathBuf;

pub use commands::{cmd_elasticity, cmd_estimate, cmd_simulate, cmd_welfare, EstimateFlags};
pub use config::{LoadedConfig, RunConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fusedchoice::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(fusedchoice::Error::Io { .. }) | CliError::Io { .. } => EXIT_IO,
            CliError::Core(fusedchoice::Error::Numerical(_)) => EXIT_NUMERICAL,
            CliError::Core(_) | CliError::Config(_) => EXIT_CONFIG,
        }
    }
}
