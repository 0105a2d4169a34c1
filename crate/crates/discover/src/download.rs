use std::path::{Path, PathBuf};

use cellvista_core::store::{Catalog, CatalogEntry, DatasetSource};
use futures::StreamExt;
use reqwest::header::{CONTENT_RANGE, RANGE};
use reqwest::StatusCode;
use sha2::{Digest, Sha256};
use tokio::fs;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use crate::client::{check_status, network, DiscoverClient};
use crate::{DiscoverError, RemoteDataset};

pub const PARTIAL_SUFFIX: &str = ".part";
pub const RAW_DIR: &str = "raw";

/// File name used for a dataset's raw download.
pub fn raw_file_name(dataset_id: &str) -> String {
    let safe: String = dataset_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.h5ad")
}

fn partial_path(final_path: &Path) -> PathBuf {
    let mut name = final_path.file_name().unwrap_or_default().to_os_string();
    name.push(PARTIAL_SUFFIX);
    final_path.with_file_name(name)
}

/// Parses `bytes START-END/TOTAL`, returning START and TOTAL (if given).
fn parse_content_range(v: &str) -> Option<(u64, Option<u64>)> {
    let rest = v.trim().strip_prefix("bytes ")?;
    let (range, total) = rest.split_once('/')?;
    let (start, _) = range.split_once('-')?;
    Some((start.parse().ok()?, total.parse().ok()))
}

async fn file_len(path: &Path) -> u64 {
    fs::metadata(path).await.map(|m| m.len()).unwrap_or(0)
}

async fn sha256_of(path: &Path) -> Result<String, DiscoverError> {
    let mut f = fs::File::open(path).await.map_err(|e| DiscoverError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).await.map_err(|e| DiscoverError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl DiscoverClient {
    /// Downloads the dataset's h5ad asset into `dest_dir`, resuming a
    /// previous partial download if one exists. The bytes only appear under
    /// the final name once complete (and verified, if a digest is known).
    /// `progress(done, total)` may be called from any worker thread.
    pub async fn download_dataset(
        &self,
        ds: &RemoteDataset,
        dest_dir: &Path,
        progress: impl Fn(u64, Option<u64>) + Send + Sync,
    ) -> Result<PathBuf, DiscoverError> {
        let url = ds
            .h5ad_asset_url
            .clone()
            .ok_or_else(|| DiscoverError::NoAssetAvailable(ds.dataset_id.clone()))?;
        let _permit = self.downloads.acquire().await.expect("semaphore never closed");

        fs::create_dir_all(dest_dir)
            .await
            .map_err(|e| DiscoverError::io(dest_dir, e))?;
        let final_path = dest_dir.join(raw_file_name(&ds.dataset_id));
        if fs::try_exists(&final_path).await.unwrap_or(false) {
            let len = file_len(&final_path).await;
            progress(len, Some(len));
            return Ok(final_path);
        }
        let part = partial_path(&final_path);

        let mut offset = file_len(&part).await;
        let done = loop {
            match self.fetch_into(&url, &part, offset, &progress).await? {
                Fetch::Complete(n) => break n,
                Fetch::Restart => {
                    if offset == 0 {
                        return Err(DiscoverError::MalformedResponse(format!(
                            "{url}: unusable range response"
                        )));
                    }
                    offset = 0;
                }
            }
        };

        if let Some(expected) = &ds.sha256 {
            let actual = sha256_of(&part).await?;
            if !actual.eq_ignore_ascii_case(expected) {
                let _ = fs::remove_file(&part).await;
                return Err(DiscoverError::ChecksumMismatch {
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        fs::rename(&part, &final_path)
            .await
            .map_err(|e| DiscoverError::io(&final_path, e))?;
        tracing::info!("downloaded {} ({done} bytes)", final_path.display());
        Ok(final_path)
    }

    async fn fetch_into(
        &self,
        url: &str,
        part: &Path,
        offset: u64,
        progress: &(impl Fn(u64, Option<u64>) + Send + Sync),
    ) -> Result<Fetch, DiscoverError> {
        let mut req = self.http.get(url);
        if offset > 0 {
            req = req.header(RANGE, format!("bytes={offset}-"));
        }
        let resp = req.send().await.map_err(network)?;
        let status = resp.status();
        if status == StatusCode::RANGE_NOT_SATISFIABLE && offset > 0 {
            let total = resp
                .headers()
                .get(CONTENT_RANGE)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("bytes */"))
                .and_then(|t| t.parse::<u64>().ok());
            // the partial file already holds the whole asset
            return Ok(if total == Some(offset) {
                Fetch::Complete(offset)
            } else {
                Fetch::Restart
            });
        }
        check_status(&resp, url)?;

        let (start, total) = if status == StatusCode::PARTIAL_CONTENT {
            let range = resp
                .headers()
                .get(CONTENT_RANGE)
                .and_then(|v| v.to_str().ok())
                .and_then(parse_content_range);
            match range {
                Some((start, total)) if start == offset => (start, total),
                _ => return Ok(Fetch::Restart),
            }
        } else {
            // the server ignored the range request; start over
            (0, resp.content_length())
        };

        let mut file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(start > 0)
            .truncate(start == 0)
            .open(part)
            .await
            .map_err(|e| DiscoverError::io(part, e))?;
        let mut done = start;
        progress(done, total);
        let mut stream = resp.bytes_stream();
        let mut failure = None;
        while let Some(chunk) = stream.next().await {
            match chunk {
                Ok(bytes) => {
                    file.write_all(&bytes)
                        .await
                        .map_err(|e| DiscoverError::io(part, e))?;
                    done += bytes.len() as u64;
                    progress(done, total);
                }
                Err(e) => {
                    failure = Some(network(e));
                    break;
                }
            }
        }
        file.flush().await.map_err(|e| DiscoverError::io(part, e))?;
        file.sync_all().await.map_err(|e| DiscoverError::io(part, e))?;
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(total) = total {
            if done != total {
                return Err(DiscoverError::Incomplete {
                    expected: total,
                    received: done,
                });
            }
        }
        Ok(Fetch::Complete(done))
    }

    /// Downloads into `<data_dir>/raw/` and records the file in the catalog
    /// as a raw-only dataset.
    pub async fn download_into_catalog(
        &self,
        ds: &RemoteDataset,
        data_dir: &Path,
        progress: impl Fn(u64, Option<u64>) + Send + Sync,
    ) -> Result<CatalogEntry, DiscoverError> {
        let path = self
            .download_dataset(ds, &data_dir.join(RAW_DIR), progress)
            .await?;
        let data_dir = data_dir.to_path_buf();
        let ds = ds.clone();
        let entry = tokio::task::spawn_blocking(move || {
            Catalog::update(&data_dir, |c| {
                c.register_raw(&ds.dataset_id, &ds.title, DatasetSource::Cellxgene, &path)
                    .cloned()
            })
        })
        .await
        .expect("catalog update panicked")?;
        Ok(entry)
    }
}

enum Fetch {
    Complete(u64),
    Restart,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_range() {
        assert_eq!(parse_content_range("bytes 10-99/100"), Some((10, Some(100))));
        assert_eq!(parse_content_range("bytes 10-99/*"), Some((10, None)));
        assert_eq!(parse_content_range("items 1-2/3"), None);
    }

    #[test]
    fn names() {
        assert_eq!(raw_file_name("ab-12_x.y"), "ab-12_x.y.h5ad");
        assert_eq!(raw_file_name("../etc/passwd"), ".._etc_passwd.h5ad");
        assert_eq!(
            partial_path(Path::new("/d/x.h5ad")),
            PathBuf::from("/d/x.h5ad.part")
        );
    }

    proptest::proptest! {
        #[test]
        fn raw_names_stay_in_directory(id in ".*") {
            let name = raw_file_name(&id);
            proptest::prop_assert!(!name.contains('/') && !name.contains('\\'));
            proptest::prop_assert_eq!(Path::new(&name).components().count(), 1);
        }
    }
}
