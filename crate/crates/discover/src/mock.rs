//! A local stand-in for the Discover API, for tests and offline demos.
//!
//! Serves a configurable collections index, per-collection detail derived
//! from it, and binary assets with byte-range support. An asset can be told
//! to drop the connection part-way through its next response.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use bytes::Bytes;
use serde_json::{json, Value};
use tokio::sync::oneshot;

#[derive(Debug, Clone)]
pub struct MockAsset {
    pub bytes: Bytes,
    pub supports_ranges: bool,
    /// Drop the connection after sending this many body bytes of the next
    /// response. Consumed by that response.
    pub fail_after: Option<u64>,
    pub chunk_size: usize,
    /// Pause between chunks, to make downloads slow enough to interrupt.
    pub chunk_delay: Duration,
}

impl MockAsset {
    pub fn new(bytes: impl Into<Bytes>) -> Self {
        MockAsset {
            bytes: bytes.into(),
            supports_ranges: true,
            fail_after: None,
            chunk_size: 64 * 1024,
            chunk_delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub path: String,
    pub range: Option<String>,
}

#[derive(Debug, Clone)]
enum IndexResponse {
    Body(Bytes),
    Status(u16),
}

#[derive(Debug)]
struct MockState {
    index: Mutex<IndexResponse>,
    assets: Mutex<HashMap<String, MockAsset>>,
    requests: Mutex<Vec<RequestRecord>>,
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    /// Binds an ephemeral port on 127.0.0.1 and serves in the background of
    /// the current tokio runtime. The index starts as an empty list.
    pub async fn start() -> std::io::Result<MockServer> {
        let state = Arc::new(MockState {
            index: Mutex::new(IndexResponse::Body(Bytes::from_static(b"[]"))),
            assets: Mutex::new(HashMap::new()),
            requests: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/curation/v1/collections", get(index))
            .route("/curation/v1/collections/:id", get(detail))
            .route("/assets/:name", get(asset))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0)).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(MockServer {
            addr,
            state,
            shutdown: Some(tx),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn asset_url(&self, name: &str) -> String {
        format!("{}/assets/{name}", self.base_url())
    }

    pub fn set_index_body(&self, body: impl Into<Bytes>) {
        *self.state.index.lock().unwrap() = IndexResponse::Body(body.into());
    }

    pub fn set_index_status(&self, status: u16) {
        *self.state.index.lock().unwrap() = IndexResponse::Status(status);
    }

    pub fn add_asset(&self, name: &str, asset: MockAsset) -> String {
        self.state
            .assets
            .lock()
            .unwrap()
            .insert(name.to_string(), asset);
        self.asset_url(name)
    }

    /// Arms a one-shot disconnect after `bytes` body bytes on `name`.
    pub fn fail_next_after(&self, name: &str, bytes: u64) {
        if let Some(a) = self.state.assets.lock().unwrap().get_mut(name) {
            a.fail_after = Some(bytes);
        }
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.state.requests.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Deterministic pseudo-random bytes for asset fixtures.
pub fn asset_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    (0..len)
        .map(|_| {
            // xorshift64*
            x ^= x >> 12;
            x ^= x << 25;
            x ^= x >> 27;
            (x.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 56) as u8
        })
        .collect()
}

/// A three-collection index in the upstream schema. The lung collection's
/// first dataset points at `asset_url`; the second has no h5ad asset.
pub fn sample_index(asset_url: &str, asset_size: u64, sha256: Option<&str>) -> Value {
    let mut h5ad = json!({"filetype": "H5AD", "url": asset_url, "filesize": asset_size});
    if let Some(d) = sha256 {
        h5ad["sha256"] = json!(d);
    }
    json!([
        {
            "collection_id": "0b9d8a04-bb9d-44da-aa27-705bb65b54eb",
            "name": "Tabula Sapiens",
            "datasets": [
                {"dataset_id": "ts-blood", "title": "Blood",
                 "assets": [{"filetype": "RDS", "url": "http://unused/ts.rds", "filesize": 10}]}
            ]
        },
        {
            "collection_id": "6f6d381a-7701-4781-935c-db10d30de293",
            "name": "Integrated Human Lung Cell Atlas",
            "datasets": [
                {"dataset_id": "hlca-core", "title": "HLCA core",
                 "assets": [h5ad]},
                {"dataset_id": "hlca-rds-only", "title": "HLCA (Seurat only)",
                 "assets": [{"filetype": "RDS", "url": "http://unused/h.rds"}]}
            ]
        },
        {
            "collection_id": "c3a0d4b2-3d1a-4c54-a1f6-8e6f0b2f7a11",
            "name": "Kidney Precision Medicine Project",
            "datasets": []
        }
    ])
}

fn record(state: &MockState, path: String, headers: &HeaderMap) {
    let range = headers
        .get(header::RANGE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    state.requests.lock().unwrap().push(RequestRecord { path, range });
}

async fn index(State(state): State<Arc<MockState>>, headers: HeaderMap) -> Response {
    record(&state, "/curation/v1/collections".into(), &headers);
    let index = state.index.lock().unwrap().clone();
    match index {
        IndexResponse::Body(b) => ([(header::CONTENT_TYPE, "application/json")], b).into_response(),
        IndexResponse::Status(s) => StatusCode::from_u16(s)
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
            .into_response(),
    }
}

async fn detail(
    State(state): State<Arc<MockState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Response {
    record(&state, format!("/curation/v1/collections/{id}"), &headers);
    let index = state.index.lock().unwrap().clone();
    let IndexResponse::Body(b) = index else {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    };
    let found = serde_json::from_slice::<Vec<Value>>(&b)
        .ok()
        .and_then(|all| all.into_iter().find(|c| c["collection_id"] == id.as_str()));
    match found {
        Some(c) => axum::Json(c).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

fn parse_range(v: &str) -> Option<(u64, Option<u64>)> {
    let spec = v.trim().strip_prefix("bytes=")?;
    let (a, b) = spec.split_once('-')?;
    let start = a.parse().ok()?;
    let end = if b.is_empty() { None } else { Some(b.parse().ok()?) };
    Some((start, end))
}

async fn asset(
    State(state): State<Arc<MockState>>,
    Path(name): Path<String>,
    headers: HeaderMap,
) -> Response {
    record(&state, format!("/assets/{name}"), &headers);
    let asset = {
        let mut assets = state.assets.lock().unwrap();
        match assets.get_mut(&name) {
            Some(a) => {
                let snapshot = a.clone();
                a.fail_after = None;
                snapshot
            }
            None => return StatusCode::NOT_FOUND.into_response(),
        }
    };
    let len = asset.bytes.len() as u64;
    let range = headers
        .get(header::RANGE)
        .and_then(|v| v.to_str().ok())
        .and_then(parse_range)
        .filter(|_| asset.supports_ranges);

    let (status, start, end) = match range {
        Some((start, _)) if start >= len => {
            return (
                StatusCode::RANGE_NOT_SATISFIABLE,
                [(header::CONTENT_RANGE, format!("bytes */{len}"))],
            )
                .into_response()
        }
        Some((start, end)) => {
            let end = end.map_or(len, |e| (e + 1).min(len));
            (StatusCode::PARTIAL_CONTENT, start, end)
        }
        None => (StatusCode::OK, 0, len),
    };

    let body_bytes = asset.bytes.slice(start as usize..end as usize);
    let chunk = asset.chunk_size.max(1);
    let delay = asset.chunk_delay;
    let fail_after = asset.fail_after;
    let stream = async_stream(body_bytes, chunk, delay, fail_after);

    let mut resp = Response::builder()
        .status(status)
        .header(header::CONTENT_LENGTH, end - start)
        .header(header::CONTENT_TYPE, "application/octet-stream");
    if asset.supports_ranges {
        resp = resp.header(header::ACCEPT_RANGES, "bytes");
    }
    if status == StatusCode::PARTIAL_CONTENT {
        resp = resp.header(
            header::CONTENT_RANGE,
            format!("bytes {start}-{}/{len}", end.saturating_sub(1)),
        );
    }
    resp.body(Body::from_stream(stream)).unwrap()
}

fn async_stream(
    body: Bytes,
    chunk: usize,
    delay: Duration,
    fail_after: Option<u64>,
) -> impl futures::Stream<Item = Result<Bytes, std::io::Error>> {
    let limit = fail_after.map_or(body.len(), |f| (f as usize).min(body.len()));
    let fails = fail_after.is_some_and(|f| (f as usize) < body.len());
    futures::stream::unfold(0usize, move |pos| {
        let body = body.clone();
        async move {
            if pos >= limit {
                if fails && pos != usize::MAX {
                    return Some((
                        Err(std::io::Error::new(
                            std::io::ErrorKind::ConnectionReset,
                            "injected disconnect",
                        )),
                        usize::MAX,
                    ));
                }
                return None;
            }
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
            let end = (pos + chunk).min(limit);
            Some((Ok(body.slice(pos..end)), end))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_header() {
        assert_eq!(parse_range("bytes=5-"), Some((5, None)));
        assert_eq!(parse_range("bytes=5-9"), Some((5, Some(9))));
        assert_eq!(parse_range("bytes=-9"), None);
    }

    #[test]
    fn asset_bytes_are_deterministic() {
        assert_eq!(asset_bytes(100, 1), asset_bytes(100, 1));
        assert_ne!(asset_bytes(100, 1), asset_bytes(100, 2));
    }
}
