use std::path::PathBuf;

use deq_core::DeqError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NON_CONVERGENCE: i32 = 3;
    pub const ASSUMPTION: i32 = 4;
    pub const ASSERTION: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// A library failure, tagged with the command stage it came from.
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: DeqError,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A check run by the command did not pass.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::CheckFailed(_) => exit::ASSERTION,
            CliError::Io { .. } => exit::OTHER,
            CliError::Core { source, .. } => match source.root() {
                DeqError::Convergence { .. } => exit::NON_CONVERGENCE,
                DeqError::WellPosedness { .. } | DeqError::Assumption(_) | DeqError::Degenerate(_) => exit::ASSUMPTION,
                DeqError::Assertion(_) => exit::ASSERTION,
                DeqError::Input(_) | DeqError::Shape { .. } | DeqError::Parse(_) => exit::CONFIG,
                DeqError::Io(_) | DeqError::AtStep { .. } => exit::OTHER,
            },
        }
    }
}

/// Attaches a context label to library errors.
pub trait Context<T> {
    fn context(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, DeqError> {
    fn context(self, what: &str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: what.to_string(),
            source,
        })
    }
}
