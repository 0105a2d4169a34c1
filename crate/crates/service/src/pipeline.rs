//! Ingest and precompute steps, shared by the CLI and the HTTP jobs.

use std::path::{Path, PathBuf};

use cellvista_core::anndata::{open_and_parse, AnnDataError};
use cellvista_core::stats::{precompute_markers, MarkerCollection, StatsError};
use cellvista_core::store::{
    build_store, write_markers, Catalog, CatalogEntry, CatalogError, DatasetSource, Store,
    StoreError,
};
use thiserror::Error;

pub const STORE_DIR: &str = "stores";
pub const STORE_EXTENSION: &str = "cvstore";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    AnnData(#[from] AnnDataError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("dataset {0} has not been ingested")]
    NotProcessed(String),
    #[error("dataset {0} has no raw file to ingest")]
    NoRawFile(String),
}

pub fn store_path(data_dir: &Path, dataset_id: &str) -> PathBuf {
    let safe: String = dataset_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    data_dir
        .join(STORE_DIR)
        .join(format!("{safe}.{STORE_EXTENSION}"))
}

pub fn entry(data_dir: &Path, dataset_id: &str) -> Result<CatalogEntry, PipelineError> {
    Catalog::open(data_dir)?
        .get(dataset_id)
        .cloned()
        .ok_or_else(|| CatalogError::UnknownDataset(dataset_id.to_string()).into())
}

/// Registers an h5ad file already on disk. The file is referenced in place.
pub fn register_local(
    data_dir: &Path,
    dataset_id: &str,
    title: &str,
    file: &Path,
) -> Result<CatalogEntry, PipelineError> {
    let file = std::path::absolute(file).map_err(|e| StoreError::io(file, e))?;
    let e = Catalog::update(data_dir, |c| {
        c.register_raw(dataset_id, title, DatasetSource::Local, &file).cloned()
    })?;
    Ok(e)
}

/// Parses the dataset's raw h5ad and builds its store. `progress` receives
/// a fraction in [0, 1].
pub fn ingest(
    data_dir: &Path,
    dataset_id: &str,
    progress: &dyn Fn(f64),
) -> Result<CatalogEntry, PipelineError> {
    let e = entry(data_dir, dataset_id)?;
    let raw_path = e
        .raw_path
        .ok_or_else(|| PipelineError::NoRawFile(dataset_id.to_string()))?;
    progress(0.0);
    let raw = open_and_parse(&raw_path)?;
    progress(0.4);
    let dest = store_path(data_dir, dataset_id);
    std::fs::create_dir_all(dest.parent().unwrap())
        .map_err(|e| StoreError::io(dest.parent().unwrap(), e))?;
    build_store(&raw, &dest)?;
    progress(0.9);
    let e = Catalog::update(data_dir, |c| c.mark_processed(dataset_id, &dest).cloned())?;
    progress(1.0);
    tracing::info!(
        "ingested {dataset_id}: {} cells, {} genes",
        raw.cell_count,
        raw.gene_count()
    );
    Ok(e)
}

pub fn processed_store_path(data_dir: &Path, dataset_id: &str) -> Result<PathBuf, PipelineError> {
    entry(data_dir, dataset_id)?
        .store_path
        .ok_or_else(|| PipelineError::NotProcessed(dataset_id.to_string()))
}

/// Computes one-vs-rest markers for every annotation category and stores
/// them in the dataset's store file.
pub fn precompute(
    data_dir: &Path,
    dataset_id: &str,
    progress: &dyn Fn(f64),
) -> Result<MarkerCollection, PipelineError> {
    let path = processed_store_path(data_dir, dataset_id)?;
    progress(0.0);
    let store = Store::open(&path)?;
    let markers = precompute_markers(&store, store.annotations())?;
    drop(store);
    progress(0.9);
    write_markers(&path, &markers)?;
    progress(1.0);
    Ok(markers)
}
