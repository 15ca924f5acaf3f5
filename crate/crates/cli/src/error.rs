use std::path::PathBuf;

use pirtune_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config hash mismatch in {dir}: directory holds {found}, config hashes to {expected}")]
    HashMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },

    #[error("artifact {0} does not match its manifest checksum")]
    Corrupt(PathBuf),

    #[error("run directory {0} is locked by another process (remove the lock file if stale)")]
    Locked(PathBuf),

    #[error("numerical abort: {0}")]
    Numerical(CoreError),

    #[error(transparent)]
    Core(CoreError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged { .. } => CliError::Numerical(e),
            other => CliError::Core(other),
        }
    }
}

impl From<pirtune_core::checkpoint::CheckpointError> for CliError {
    fn from(e: pirtune_core::checkpoint::CheckpointError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 missing artifact, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::HashMismatch { .. } => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numerical(_) => 4,
            _ => 1,
        }
    }
}
