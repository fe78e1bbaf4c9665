//! Filesystem, configuration, and pipeline-stage layer over
//! `topdenoise-core`: dataset synthesis on disk, checkpointed training
//! stages, evaluation reports, and the error-to-exit-code policy shared
//! by every subcommand.

use std::fmt;
use std::path::Path;

pub mod config;
pub mod formats;
pub mod stages;

/// Command-level failure. `Config` means the invocation itself is wrong
/// (bad flags, bad config file, invalid values) and maps to exit code 2;
/// `State` means the world is not ready (missing checkpoints, held locks,
/// unreadable files) and maps to exit code 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    State(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        CliError::State(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::State(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::State(m) => write!(f, "state error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<topdenoise_core::Error> for CliError {
    fn from(e: topdenoise_core::Error) -> Self {
        use topdenoise_core::Error::*;
        match e {
            Argument(m) | Dimension(m) | Degenerate(m) => CliError::Config(m),
            State(m) | NonFinite(m) => CliError::State(m),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("json: {e}"))
    }
}

/// Attaches the offending path to an io error.
pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::State(format!("{}: {e}", path.display()))
}
