use std::sync::Arc;
use std::time::SystemTime;

use serde::Serialize;
use tokio::sync::Semaphore;

use crate::cache::{self, CachedBody};
use crate::config::DiscoverConfig;
use crate::model::{parse_collection, parse_collections, RemoteCollection, RemoteDataset};
use crate::DiscoverError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectionListing {
    pub collections: Vec<RemoteCollection>,
    /// True when the server could not be reached and an expired cache was
    /// served instead.
    pub stale: bool,
    /// Seconds since the Unix epoch at which the listing was fetched.
    pub fetched_at: u64,
}

#[derive(Debug, Clone)]
pub struct DiscoverClient {
    pub(crate) config: DiscoverConfig,
    pub(crate) http: reqwest::Client,
    pub(crate) downloads: Arc<Semaphore>,
}

impl DiscoverClient {
    pub fn new(config: DiscoverConfig) -> Result<Self, DiscoverError> {
        let http = reqwest::Client::builder()
            .connect_timeout(config.connect_timeout)
            .user_agent(concat!("cellvista/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| DiscoverError::NetworkUnavailable(e.to_string()))?;
        let downloads = Arc::new(Semaphore::new(config.max_concurrent_downloads.max(1)));
        Ok(DiscoverClient {
            config,
            http,
            downloads,
        })
    }

    pub fn config(&self) -> &DiscoverConfig {
        &self.config
    }

    pub(crate) async fn get_bytes(&self, url: &str) -> Result<Vec<u8>, DiscoverError> {
        let resp = self.http.get(url).send().await.map_err(network)?;
        check_status(&resp, url)?;
        let body = resp.bytes().await.map_err(network)?;
        Ok(body.to_vec())
    }

    /// Collections whose name contains `filter` (case-insensitive).
    pub async fn list_collections(&self, filter: Option<&str>) -> Result<CollectionListing, DiscoverError> {
        self.list(filter, false).await
    }

    /// Like [`list_collections`](Self::list_collections) but ignores a fresh
    /// cache.
    pub async fn refresh_collections(&self, filter: Option<&str>) -> Result<CollectionListing, DiscoverError> {
        self.list(filter, true).await
    }

    async fn list(&self, filter: Option<&str>, force: bool) -> Result<CollectionListing, DiscoverError> {
        let url = self.config.collections_url();
        let cached = cache::load(&self.config.cache_dir, &url)
            .and_then(|c| parse_collections(c.body.as_bytes()).ok().map(|p| (c, p)));

        if let Some((c, parsed)) = &cached {
            if !force && c.is_fresh(self.config.cache_ttl, SystemTime::now()) {
                return Ok(listing(parsed.clone(), false, c.fetched_at, filter));
            }
        }

        match self.get_bytes(&url).await {
            Ok(body) => {
                let parsed = parse_collections(&body)?;
                let entry = CachedBody {
                    url,
                    fetched_at: cache::unix_now(),
                    body: String::from_utf8(body)
                        .map_err(|e| DiscoverError::MalformedResponse(e.to_string()))?,
                };
                if let Err(e) = cache::store(&self.config.cache_dir, &entry) {
                    tracing::warn!("could not write listing cache: {e}");
                }
                Ok(listing(parsed, false, entry.fetched_at, filter))
            }
            Err(DiscoverError::NetworkUnavailable(reason)) => match cached {
                Some((c, parsed)) => {
                    tracing::warn!("serving cached collections: {reason}");
                    Ok(listing(parsed, true, c.fetched_at, filter))
                }
                None => Err(DiscoverError::NetworkUnavailable(reason)),
            },
            Err(e) => Err(e),
        }
    }

    /// Detail of one collection, fetched directly.
    pub async fn collection(&self, collection_id: &str) -> Result<RemoteCollection, DiscoverError> {
        let body = self.get_bytes(&self.config.collection_url(collection_id)).await?;
        parse_collection(&body)
    }

    /// Looks a dataset up by id in the (possibly cached) listing.
    pub async fn find_dataset(&self, dataset_id: &str) -> Result<RemoteDataset, DiscoverError> {
        let listing = self.list_collections(None).await?;
        listing
            .collections
            .into_iter()
            .flat_map(|c| c.datasets)
            .find(|d| d.dataset_id == dataset_id)
            .ok_or_else(|| DiscoverError::UnknownDataset(dataset_id.to_string()))
    }
}

fn listing(
    all: Vec<RemoteCollection>,
    stale: bool,
    fetched_at: u64,
    filter: Option<&str>,
) -> CollectionListing {
    let filter = filter.unwrap_or("");
    CollectionListing {
        collections: all.into_iter().filter(|c| c.matches(filter)).collect(),
        stale,
        fetched_at,
    }
}

pub(crate) fn network(e: reqwest::Error) -> DiscoverError {
    DiscoverError::NetworkUnavailable(e.to_string())
}

/// Server errors count as the upstream being unavailable; client errors are
/// reported as they are.
pub(crate) fn check_status(resp: &reqwest::Response, url: &str) -> Result<(), DiscoverError> {
    let status = resp.status();
    if status.is_success() || status.as_u16() == 206 {
        Ok(())
    } else if status.is_server_error() {
        Err(DiscoverError::NetworkUnavailable(format!("{url}: server answered {status}")))
    } else {
        Err(DiscoverError::HttpStatus {
            status: status.as_u16(),
            url: url.to_string(),
        })
    }
}
