//! Library surface of the experiment driver, kept separate from the binary
//! so integration tests can call commands directly.

pub mod commands;
pub mod config;

use thiserror::Error;

/// Exit code 1 for configuration problems, 2 for runtime/numeric failures.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}
