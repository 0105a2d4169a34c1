use serde::{Deserialize, Serialize};

use crate::DiscoverError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RemoteDataset {
    pub dataset_id: String,
    pub title: String,
    pub h5ad_asset_url: Option<String>,
    pub asset_size_bytes: Option<u64>,
    /// Hex SHA-256 of the asset, when the catalog publishes one.
    pub sha256: Option<String>,
}

impl RemoteDataset {
    pub fn is_downloadable(&self) -> bool {
        self.h5ad_asset_url.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RemoteCollection {
    pub collection_id: String,
    pub name: String,
    pub datasets: Vec<RemoteDataset>,
}

impl RemoteCollection {
    pub fn matches(&self, filter: &str) -> bool {
        self.name.to_lowercase().contains(&filter.to_lowercase())
    }
}

#[derive(Deserialize)]
struct WireAsset {
    filetype: String,
    url: Option<String>,
    filesize: Option<u64>,
    sha256: Option<String>,
}

#[derive(Deserialize)]
struct WireDataset {
    dataset_id: String,
    title: Option<String>,
    #[serde(default)]
    assets: Vec<WireAsset>,
}

#[derive(Deserialize)]
struct WireCollection {
    collection_id: String,
    name: Option<String>,
    #[serde(default)]
    datasets: Vec<WireDataset>,
}

fn convert(c: WireCollection) -> Result<RemoteCollection, DiscoverError> {
    if c.collection_id.trim().is_empty() {
        return Err(DiscoverError::MalformedResponse("empty collection_id".into()));
    }
    let datasets = c
        .datasets
        .into_iter()
        .map(|d| {
            if d.dataset_id.trim().is_empty() {
                return Err(DiscoverError::MalformedResponse(format!(
                    "empty dataset_id in collection {}",
                    c.collection_id
                )));
            }
            let h5ad = d
                .assets
                .into_iter()
                .find(|a| a.filetype.eq_ignore_ascii_case("h5ad") && a.url.is_some());
            Ok(RemoteDataset {
                title: d.title.unwrap_or_else(|| d.dataset_id.clone()),
                dataset_id: d.dataset_id,
                asset_size_bytes: h5ad.as_ref().and_then(|a| a.filesize),
                sha256: h5ad.as_ref().and_then(|a| a.sha256.clone()),
                h5ad_asset_url: h5ad.and_then(|a| a.url),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(RemoteCollection {
        name: c.name.unwrap_or_default(),
        collection_id: c.collection_id,
        datasets,
    })
}

/// Parses a collections index body. Depends only on the bytes given.
pub fn parse_collections(body: &[u8]) -> Result<Vec<RemoteCollection>, DiscoverError> {
    let wire: Vec<WireCollection> = serde_json::from_slice(body)
        .map_err(|e| DiscoverError::MalformedResponse(e.to_string()))?;
    wire.into_iter().map(convert).collect()
}

/// Parses a single-collection detail body.
pub fn parse_collection(body: &[u8]) -> Result<RemoteCollection, DiscoverError> {
    let wire: WireCollection = serde_json::from_slice(body)
        .map_err(|e| DiscoverError::MalformedResponse(e.to_string()))?;
    convert(wire)
}
