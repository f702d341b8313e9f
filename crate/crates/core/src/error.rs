use thiserror::Error;

use crate::engine::SessionStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid interaction event: {0}")]
    InvalidEvent(String),

    #[error("session is {0:?} and no longer accepts this request")]
    SessionClosed(SessionStatus),

    #[error("iteration cap of {0} reached; session expired")]
    IterationCap(usize),

    #[error("no prediction has been made yet")]
    NoPrediction,

    #[error("dataset case {case_id}: {message}")]
    Dataset { case_id: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(what: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} = {value}")))
    }
}
