//! Browsing and downloading datasets from the CELLxGENE Discover catalog.

mod cache;
mod client;
pub mod config;
mod download;
pub mod mock;
mod model;

use std::path::PathBuf;

use thiserror::Error;

pub use client::{CollectionListing, DiscoverClient};
pub use config::{DiscoverConfig, Endpoints};
pub use download::{raw_file_name, PARTIAL_SUFFIX, RAW_DIR};
pub use model::{parse_collections, RemoteCollection, RemoteDataset};

#[derive(Debug, Error)]
pub enum DiscoverError {
    #[error("network unavailable: {0}")]
    NetworkUnavailable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("dataset {0} has no h5ad asset")]
    NoAssetAvailable(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("server answered {status} for {url}")]
    HttpStatus { status: u16, url: String },
    #[error("download ended after {received} of {expected} bytes")]
    Incomplete { expected: u64, received: u64 },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Catalog(#[from] cellvista_core::store::CatalogError),
}

impl DiscoverError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DiscoverError::Io {
            path: path.into(),
            source,
        }
    }
}
