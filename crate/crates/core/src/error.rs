use std::io;

/// Errors produced by the `pslm` library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("text of length {len} does not fit in {target} frames")]
    TextTooLong { len: usize, target: usize },

    #[error("sequence of {len} frames exceeds the context limit of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("checkpoint does not match the expected model configuration: {0}")]
    CheckpointMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
