use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use cellvista_core::anndata::AnnDataError;
use cellvista_core::spatial::SpatialError;
use cellvista_core::stats::StatsError;
use cellvista_core::store::{CatalogError, StoreError};
use cellvista_discover::DiscoverError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::pipeline::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    BadRequest,
    Conflict,
    UpstreamUnavailable,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::UpstreamUnavailable => StatusCode::BAD_GATEWAY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            detail: None,
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Conflict, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.code == ErrorCode::Internal {
            tracing::error!("{}", self.message);
        }
        (self.code.status(), Json(self)).into_response()
    }
}

impl From<StatsError> for ApiError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::SelectionTooSmall {
                selected,
                unselected,
            } => ApiError::bad_request(e.to_string()).with_detail(json!({
                "reason": "selection_too_small",
                "selected": selected,
                "unselected": unselected,
            })),
            StatsError::CellOutOfRange { .. } => ApiError::bad_request(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<SpatialError> for ApiError {
    fn from(e: SpatialError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::IndexOutOfRange { .. } => ApiError::not_found(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::UnknownDataset(_) => ApiError::not_found(e.to_string()),
            CatalogError::IllegalState { .. } => ApiError::conflict(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<DiscoverError> for ApiError {
    fn from(e: DiscoverError) -> Self {
        match e {
            DiscoverError::NetworkUnavailable(_)
            | DiscoverError::MalformedResponse(_)
            | DiscoverError::HttpStatus { .. }
            | DiscoverError::Incomplete { .. }
            | DiscoverError::ChecksumMismatch { .. } => {
                ApiError::new(ErrorCode::UpstreamUnavailable, e.to_string())
            }
            DiscoverError::UnknownDataset(_) => ApiError::not_found(e.to_string()),
            DiscoverError::NoAssetAvailable(_) => ApiError::bad_request(e.to_string()),
            DiscoverError::Catalog(c) => c.into(),
            DiscoverError::Io { .. } => ApiError::internal(e.to_string()),
        }
    }
}

impl From<AnnDataError> for ApiError {
    fn from(e: AnnDataError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Catalog(c) => c.into(),
            PipelineError::Store(s) => s.into(),
            PipelineError::AnnData(a) => a.into(),
            PipelineError::Stats(s) => s.into(),
            PipelineError::NotProcessed(_) | PipelineError::NoRawFile(_) => {
                ApiError::conflict(e.to_string())
            }
        }
    }
}

/// Failures starting the server.
#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {port} on {host} is already in use")]
    PortInUse { host: String, port: u16 },
    #[error("data directory {path} is not writable: {source}")]
    DataDirUnwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot listen on {host}:{port}: {source}")]
    Bind {
        host: String,
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Discover(#[from] DiscoverError),
}
