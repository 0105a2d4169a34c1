//! On-disk copy of the last good collections index.
//!
//! `<cache_dir>/collections.json` holds `{"url", "fetched_at", "body"}`
//! where `body` is the verbatim server response. It is replaced atomically.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::DiscoverError;

pub(crate) const COLLECTIONS_FILE: &str = "collections.json";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct CachedBody {
    pub url: String,
    /// Seconds since the Unix epoch.
    pub fetched_at: u64,
    pub body: String,
}

impl CachedBody {
    pub fn fetched_time(&self) -> SystemTime {
        UNIX_EPOCH + Duration::from_secs(self.fetched_at)
    }

    pub fn is_fresh(&self, ttl: Duration, now: SystemTime) -> bool {
        now.duration_since(self.fetched_time())
            .map(|age| age < ttl)
            // a timestamp in the future counts as fresh
            .unwrap_or(true)
    }
}

pub(crate) fn path(cache_dir: &Path) -> PathBuf {
    cache_dir.join(COLLECTIONS_FILE)
}

/// Returns the cached body, or `None` if it is missing, unreadable or was
/// fetched from a different URL.
pub(crate) fn load(cache_dir: &Path, url: &str) -> Option<CachedBody> {
    let text = fs::read(path(cache_dir)).ok()?;
    let c: CachedBody = serde_json::from_slice(&text).ok()?;
    (c.url == url).then_some(c)
}

pub(crate) fn store(cache_dir: &Path, entry: &CachedBody) -> Result<(), DiscoverError> {
    fs::create_dir_all(cache_dir).map_err(|e| DiscoverError::io(cache_dir, e))?;
    let tmp = cache_dir.join(format!(
        ".{COLLECTIONS_FILE}.tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let bytes = serde_json::to_vec(entry).expect("plain struct");
    fs::write(&tmp, bytes).map_err(|e| DiscoverError::io(&tmp, e))?;
    fs::rename(&tmp, path(cache_dir)).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DiscoverError::io(path(cache_dir), e)
    })
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_url_check() {
        let dir = tempfile::tempdir().unwrap();
        let e = CachedBody {
            url: "http://a/c".into(),
            fetched_at: 100,
            body: "[]".into(),
        };
        store(dir.path(), &e).unwrap();
        assert_eq!(load(dir.path(), "http://a/c"), Some(e));
        assert_eq!(load(dir.path(), "http://b/c"), None);
    }

    #[test]
    fn freshness() {
        let e = CachedBody {
            url: String::new(),
            fetched_at: 1000,
            body: String::new(),
        };
        let ttl = Duration::from_secs(10);
        assert!(e.is_fresh(ttl, UNIX_EPOCH + Duration::from_secs(1009)));
        assert!(!e.is_fresh(ttl, UNIX_EPOCH + Duration::from_secs(1010)));
        assert!(e.is_fresh(ttl, UNIX_EPOCH + Duration::from_secs(5)));
    }
}
