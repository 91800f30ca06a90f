use std::path::PathBuf;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of {len} symbols exceeds the context limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,

    #[error("non-finite gradient in tensor `{tensor}` (global norm {norm})")]
    NonFiniteGradient { tensor: String, norm: f64 },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        /// The offending batch, serialized as JSON for post-mortem inspection.
        batch_json: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("infeasible toy-language spec: {0}")]
    InfeasibleSpec(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
