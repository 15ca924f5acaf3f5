use std::path::PathBuf;

use pirtune_autodiff::AutodiffError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("network spec `{network}` is inconsistent: {detail}")]
    InvalidSpec { network: String, detail: String },

    #[error("{stage} diverged (non-finite loss) at step {step}")]
    Diverged { stage: &'static str, step: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("filter index {index} out of range for layer `{layer}` with {filters} filters")]
    FilterOutOfRange {
        layer: String,
        index: usize,
        filters: usize,
    },

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("need at least {needed} runs, got {got}")]
    InsufficientRuns { needed: usize, got: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Self::InvalidArgument(detail.into())
    }
}
