//! Library half of the command line tool; the binary in `main.rs` is a
//! thin argument parser over these modules.
//!
//! Exit code contract: 0 success and all checks passed, 1 a check found a
//! violation, 2 the input is ambiguous (an alignment indicator in the grey
//! zone between cancelled and live), 3 configuration errors, 4 file I/O
//! errors, 5 runtime failures inside a simulation.

use thiserror::Error;

pub mod config;
pub mod csvio;
pub mod manifest;
pub mod report;
pub mod reproduce;
pub mod runner;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),

    /// The initial state does not determine the limit: a decisive indicator
    /// sits between the cancellation tolerance and the live threshold.
    #[error("{0}")]
    Ambiguous(String),

    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    /// Operational exit code; check violations (exit 1) are signalled by
    /// command results, not errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Ambiguous(_) => 2,
            CliError::Config(_) | CliError::Format(_) => 3,
            CliError::Io(_) => 4,
            CliError::Run(_) => 5,
        }
    }
}
