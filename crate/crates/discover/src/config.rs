use std::path::PathBuf;
use std::time::Duration;

pub const DEFAULT_API_BASE: &str = "https://api.cellxgene.cziscience.com";
pub const API_BASE_ENV: &str = "CELLVISTA_API_BASE";

/// Every endpoint path the client uses. A change in the upstream API layout
/// should only need a change here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoints {
    pub collections: String,
    /// `{collection_id}` is substituted.
    pub collection: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        Endpoints {
            collections: "/curation/v1/collections".into(),
            collection: "/curation/v1/collections/{collection_id}".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscoverConfig {
    pub base_url: String,
    pub endpoints: Endpoints,
    /// Listing cache location; see the repository README for the layout.
    pub cache_dir: PathBuf,
    pub cache_ttl: Duration,
    pub max_concurrent_downloads: usize,
    pub connect_timeout: Duration,
}

impl DiscoverConfig {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        DiscoverConfig {
            base_url: DEFAULT_API_BASE.into(),
            endpoints: Endpoints::default(),
            cache_dir: cache_dir.into(),
            cache_ttl: Duration::from_secs(24 * 60 * 60),
            max_concurrent_downloads: 2,
            connect_timeout: Duration::from_secs(10),
        }
    }

    /// Like [`DiscoverConfig::new`], honouring the base-URL override in the
    /// environment.
    pub fn from_env(cache_dir: impl Into<PathBuf>) -> Self {
        let mut c = Self::new(cache_dir);
        if let Ok(base) = std::env::var(API_BASE_ENV) {
            if !base.trim().is_empty() {
                c.base_url = base.trim().to_string();
            }
        }
        c
    }

    pub fn with_base_url(mut self, base: impl Into<String>) -> Self {
        self.base_url = base.into();
        self
    }

    pub fn collections_url(&self) -> String {
        join(&self.base_url, &self.endpoints.collections)
    }

    pub fn collection_url(&self, collection_id: &str) -> String {
        join(
            &self.base_url,
            &self.endpoints.collection.replace("{collection_id}", collection_id),
        )
    }
}

fn join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls() {
        let c = DiscoverConfig::new("/tmp").with_base_url("http://127.0.0.1:9/");
        assert_eq!(c.collections_url(), "http://127.0.0.1:9/curation/v1/collections");
        assert_eq!(
            c.collection_url("abc"),
            "http://127.0.0.1:9/curation/v1/collections/abc"
        );
        assert_eq!(DiscoverConfig::new("/tmp").base_url, DEFAULT_API_BASE);
        assert_eq!(c.max_concurrent_downloads, 2);
        assert_eq!(c.cache_ttl, Duration::from_secs(86400));
    }
}
