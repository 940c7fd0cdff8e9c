use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Stable, machine-readable error codes returned in the `code` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    UnknownSession,
    UnknownDataset,
    UnknownQuery,
    InvalidConfig,
    InvalidRanking,
    NoPendingQuery,
    QueryAlreadyRanked,
    ItemNotDisplayed,
    LogCorrupt,
    Internal,
}

impl ErrorCode {
    pub fn status(&self) -> StatusCode {
        match self {
            ErrorCode::UnknownSession | ErrorCode::UnknownQuery => StatusCode::NOT_FOUND,
            ErrorCode::UnknownDataset
            | ErrorCode::InvalidConfig
            | ErrorCode::InvalidRanking
            | ErrorCode::ItemNotDisplayed => StatusCode::BAD_REQUEST,
            ErrorCode::NoPendingQuery | ErrorCode::QueryAlreadyRanked => StatusCode::CONFLICT,
            ErrorCode::LogCorrupt | ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }
}

impl From<prefopt_core::Error> for ServiceError {
    fn from(e: prefopt_core::Error) -> Self {
        use prefopt_core::Error as E;
        let code = match &e {
            E::InvalidRanking(_) => ErrorCode::InvalidRanking,
            E::InvalidArgument(_) | E::DimensionMismatch { .. } | E::PopulationMismatch { .. } => {
                ErrorCode::InvalidConfig
            }
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(format!("i/o: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code, message: self.message };
        (self.code.status(), Json(body)).into_response()
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;
