//! Gene-major on-disk store and the local dataset catalog.

mod build;
pub mod catalog;
pub mod format;
mod reader;

use std::path::PathBuf;

use thiserror::Error;

pub use build::{build_store, build_store_with, transpose_to_columns, write_markers, BuildOptions};
pub use catalog::{Catalog, CatalogEntry, CatalogError, DatasetSource, DatasetState};
pub use format::StoreHeader;
pub use reader::{EmbeddingBlock, GeneColumn, Store, MAX_LOOKUP_RESULTS};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("estimated build workspace of {needed} bytes exceeds the budget of {budget} bytes")]
    OutOfMemoryBudget { needed: u64, budget: u64 },
    #[error("not a store file (bad magic)")]
    BadMagic,
    #[error("unsupported store format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt store section: {0}")]
    CorruptSection(String),
    #[error("gene index {index} out of range (n_genes = {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dataset has {0} cells, more than the store format supports")]
    TooManyCells(usize),
}

impl StoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::IoFailure {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests;
