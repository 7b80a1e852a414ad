use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("interface error (agent {agent}): {msg}")]
    Interface { agent: usize, msg: String },

    #[error("stream aborted at sample {index}: {source}")]
    Stream {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 contract, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_)
            | Error::Contract(_)
            | Error::Interface { .. }
            | Error::Divergence(_)
            | Error::Checkpoint(_) => 3,
            Error::Stream { source, .. } => source.exit_code(),
            Error::Verification(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
