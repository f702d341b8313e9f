use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use crate::api::ErrorBody;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no session {0}")]
    NotFound(String),

    #[error("{0}")]
    BadRequest(String),

    #[error("{message}")]
    Conflict { message: String, resume_hint: Option<String> },

    #[error("{0}")]
    TooLarge(String),

    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Conflict { .. } => StatusCode::CONFLICT,
            Self::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<segloop_core::Error> for ApiError {
    fn from(e: segloop_core::Error) -> Self {
        use segloop_core::Error as E;
        match e {
            E::SessionClosed(_) | E::IterationCap(_) | E::NoPrediction => {
                Self::Conflict { message: e.to_string(), resume_hint: None }
            }
            E::InvalidEvent(_) | E::InvalidArgument(_) | E::Shape(_) | E::Codec(_) => Self::BadRequest(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        Self::BadRequest(format!("malformed JSON body: {e}"))
    }
}

impl From<axum::extract::rejection::BytesRejection> for ApiError {
    fn from(e: axum::extract::rejection::BytesRejection) -> Self {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            Self::TooLarge(e.body_text())
        } else {
            Self::BadRequest(e.body_text())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let Self::Internal(m) = &self {
            log::error!("internal error: {m}");
        }
        let resume_hint = match &self {
            Self::Conflict { resume_hint, .. } => resume_hint.clone(),
            _ => None,
        };
        (self.status(), Json(ErrorBody { error: self.to_string(), resume_hint })).into_response()
    }
}
