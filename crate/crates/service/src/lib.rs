//! Command-line workflows and the live teleoperation service for the
//! simulated rover.

pub mod cli;
pub mod config;
pub mod protocol;
pub mod server;

use thiserror::Error;

use rover_core::eval::EvalError;
use rover_core::io::IoError;
use rover_core::sim::SimError;

/// CLI failures, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match &e {
            IoError::Io { .. } => CliError::Io(e.to_string()),
            IoError::Image {
                source: image::ImageError::IoError(_),
                ..
            } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(io) => io.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Eval(ev) => ev.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
