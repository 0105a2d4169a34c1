use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cellvista_core::presentation::{categorical_palette, normalize_expression, step_view, ViewAction};
use cellvista_core::spatial::{category_centroids, Centroid};
use cellvista_core::stats::{differential_expression, CategoryMarkers, MarkerTable};
use cellvista_core::store::{Catalog, CatalogEntry, Store};
use cellvista_discover::{CollectionListing, DiscoverClient};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex as AsyncMutex;

use crate::error::ApiError;
use crate::jobs::{JobKind, JobStatus, Jobs};
use crate::pipeline::{self, PipelineError};
use crate::session::{Dataset, SelectionSpec, SessionInfo, SessionState};
use crate::wire;

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

pub struct AppState {
    pub data_dir: PathBuf,
    pub discover: DiscoverClient,
    pub jobs: Jobs,
    datasets: Mutex<HashMap<String, Arc<Dataset>>>,
    sessions: Mutex<HashMap<String, Arc<AsyncMutex<SessionState>>>>,
}

impl AppState {
    pub fn new(data_dir: PathBuf, discover: DiscoverClient) -> Self {
        AppState {
            data_dir,
            discover,
            jobs: Jobs::new(),
            datasets: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    /// Opens the dataset's store on first use and caches it.
    pub async fn dataset(&self, id: &str) -> ApiResult<Arc<Dataset>> {
        if let Some(d) = self.datasets.lock().unwrap().get(id) {
            return Ok(d.clone());
        }
        let data_dir = self.data_dir.clone();
        let owned = id.to_string();
        let opened = blocking(move || {
            let path = pipeline::processed_store_path(&data_dir, &owned)?;
            Ok::<_, PipelineError>(Dataset::new(&owned, Store::open(path)?))
        })
        .await?
        .map_err(|e| match e {
            PipelineError::NotProcessed(_) => ApiError::not_found(e.to_string())
                .with_detail(json!({"reason": "not_processed", "hint": "ingest"})),
            e => e.into(),
        })?;
        let d = Arc::new(opened);
        let mut cache = self.datasets.lock().unwrap();
        Ok(cache.entry(id.to_string()).or_insert(d).clone())
    }

    fn evict(&self, id: &str) {
        self.datasets.lock().unwrap().remove(id);
    }

    fn session(&self, sid: &str) -> ApiResult<Arc<AsyncMutex<SessionState>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(sid)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {sid}")))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

fn binary(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, wire::CONTENT_TYPE)], bytes).into_response()
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/catalog/remote", get(remote_catalog))
        .route("/catalog/download/:dataset_id", post(download))
        .route("/jobs/:job_id", get(job))
        .route("/datasets", get(local_catalog))
        .route("/datasets/:id/ingest", post(ingest))
        .route("/datasets/:id/precompute", post(precompute))
        .route("/datasets/:id/meta", get(meta))
        .route("/datasets/:id/embedding/:name", get(embedding))
        .route("/datasets/:id/annotation/:name", get(annotation))
        .route("/datasets/:id/genes", get(genes))
        .route("/datasets/:id/expression/:gene", get(expression))
        .route("/datasets/:id/markers/:annotation/:category", get(markers))
        .route("/sessions", post(create_session))
        .route("/sessions/:sid", get(get_session))
        .route("/sessions/:sid/selection", post(selection))
        .route("/sessions/:sid/de", post(de))
        .route("/sessions/:sid/view", post(view))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

#[derive(Deserialize)]
struct FilterQuery {
    #[serde(default)]
    filter: Option<String>,
    #[serde(default)]
    refresh: bool,
}

async fn remote_catalog(
    State(s): State<Shared>,
    Query(q): Query<FilterQuery>,
) -> ApiResult<Json<CollectionListing>> {
    let listing = if q.refresh {
        s.discover.refresh_collections(q.filter.as_deref()).await?
    } else {
        s.discover.list_collections(q.filter.as_deref()).await?
    };
    Ok(Json(listing))
}

async fn local_catalog(State(s): State<Shared>) -> ApiResult<Json<Vec<serde_json::Value>>> {
    let data_dir = s.data_dir.clone();
    let catalog = blocking(move || Catalog::open(data_dir)).await??;
    Ok(Json(catalog.entries().iter().map(entry_json).collect()))
}

fn entry_json(e: &CatalogEntry) -> serde_json::Value {
    json!({
        "dataset_id": e.dataset_id,
        "title": e.title,
        "source": e.source,
        "state": e.state(),
    })
}

fn accepted(status: JobStatus) -> Response {
    (StatusCode::ACCEPTED, Json(status)).into_response()
}

async fn job(State(s): State<Shared>, Path(job_id): Path<String>) -> ApiResult<Json<JobStatus>> {
    s.jobs
        .get(&job_id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {job_id}")))
}

async fn download(State(s): State<Shared>, Path(dataset_id): Path<String>) -> ApiResult<Response> {
    let ds = s.discover.find_dataset(&dataset_id).await?;
    if !ds.is_downloadable() {
        return Err(ApiError::bad_request(format!(
            "dataset {dataset_id} has no h5ad asset"
        )));
    }
    let handle = s.jobs.submit(JobKind::Download, &dataset_id)?;
    let status = handle.status();
    tokio::spawn(async move {
        let result = s
            .discover
            .download_into_catalog(&ds, &s.data_dir, |done, total| {
                if let Some(t) = total.filter(|&t| t > 0) {
                    handle.progress(done as f64 / t as f64);
                }
            })
            .await
            .map(|_| ());
        handle.finish(result);
    });
    Ok(accepted(status))
}

async fn ingest(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let e = {
        let (d, i) = (s.data_dir.clone(), id.clone());
        blocking(move || pipeline::entry(&d, &i)).await??
    };
    if e.raw_path.is_none() {
        return Err(PipelineError::NoRawFile(id).into());
    }
    let handle = s.jobs.submit(JobKind::Ingest, &id)?;
    let status = handle.status();
    tokio::task::spawn_blocking(move || {
        let r = pipeline::ingest(&s.data_dir, &id, &|p| handle.progress(p)).map(|_| ());
        s.evict(&id);
        handle.finish(r);
    });
    Ok(accepted(status))
}

async fn precompute(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    {
        let (d, i) = (s.data_dir.clone(), id.clone());
        blocking(move || pipeline::processed_store_path(&d, &i)).await??;
    }
    let handle = s.jobs.submit(JobKind::Precompute, &id)?;
    let status = handle.status();
    tokio::task::spawn_blocking(move || {
        let r = pipeline::precompute(&s.data_dir, &id, &|p| handle.progress(p)).map(|_| ());
        s.evict(&id);
        handle.finish(r);
    });
    Ok(accepted(status))
}

#[derive(Serialize)]
struct CategoryMeta {
    label: String,
    count: usize,
    color: [f64; 3],
    /// Mean position in the default embedding.
    #[serde(skip_serializing_if = "Option::is_none")]
    centroid: Option<[f64; 3]>,
}

#[derive(Serialize)]
struct AnnotationMeta {
    name: String,
    missing_category: Option<u32>,
    categories: Vec<CategoryMeta>,
}

#[derive(Serialize)]
struct EmbeddingMeta {
    name: String,
    dims: usize,
    padded: bool,
}

async fn meta(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let d = s.dataset(&id).await?;
    let title = {
        let (dd, i) = (s.data_dir.clone(), id.clone());
        blocking(move || pipeline::entry(&dd, &i)).await??.title
    };
    let body = blocking(move || -> ApiResult<serde_json::Value> {
        let store = &d.store;
        let default = store.default_embedding().map(|e| e.name.clone());
        let points = match &default {
            Some(name) => Some(d.point_index(name)?),
            None => None,
        };
        let mut annotations = Vec::new();
        for a in store.annotations() {
            let mut counts = vec![0usize; a.categories.len()];
            for &c in &a.codes {
                counts[c as usize] += 1;
            }
            let centroids: HashMap<String, Centroid> = match &points {
                Some(ix) => category_centroids(ix.points(), a)?
                    .into_iter()
                    .map(|c| (c.label.clone(), c))
                    .collect(),
                None => HashMap::new(),
            };
            let colors = categorical_palette(a.categories.len());
            annotations.push(AnnotationMeta {
                name: a.name.clone(),
                missing_category: a.missing_category,
                categories: a
                    .categories
                    .iter()
                    .enumerate()
                    .map(|(k, label)| CategoryMeta {
                        label: label.clone(),
                        count: counts[k],
                        color: colors[k],
                        centroid: centroids.get(label).map(|c| c.position),
                    })
                    .collect(),
            });
        }
        let embeddings: Vec<EmbeddingMeta> = store
            .embeddings()
            .iter()
            .map(|e| EmbeddingMeta {
                name: e.name.clone(),
                dims: e.dims,
                padded: e.dims < 3,
            })
            .collect();
        Ok(json!({
            "dataset_id": d.id,
            "title": title,
            "n_cells": store.n_cells(),
            "n_genes": store.n_genes(),
            "nnz": store.nnz(),
            "has_markers": store.markers().is_some(),
            "default_embedding": default,
            "embeddings": embeddings,
            "annotations": annotations,
        }))
    })
    .await??;
    Ok(Json(body))
}

async fn embedding(
    State(s): State<Shared>,
    Path((id, name)): Path<(String, String)>,
) -> ApiResult<Response> {
    let d = s.dataset(&id).await?;
    let bytes = blocking(move || {
        d.store
            .embedding_block(&name)
            .map(|b| wire::encode_embedding(&b))
            .ok_or_else(|| ApiError::not_found(format!("no embedding named {name}")))
    })
    .await??;
    Ok(binary(bytes))
}

async fn annotation(
    State(s): State<Shared>,
    Path((id, name)): Path<(String, String)>,
) -> ApiResult<Response> {
    let d = s.dataset(&id).await?;
    let a = d
        .store
        .annotation(&name)
        .ok_or_else(|| ApiError::not_found(format!("no annotation named {name}")))?;
    Ok(binary(wire::encode_annotation(&a.codes, a.categories.len())))
}

#[derive(Deserialize)]
struct GeneQuery {
    #[serde(default)]
    q: String,
}

#[derive(Serialize)]
struct GeneHit {
    index: usize,
    name: String,
}

async fn genes(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<GeneQuery>,
) -> ApiResult<Json<Vec<GeneHit>>> {
    let d = s.dataset(&id).await?;
    Ok(Json(
        d.store
            .lookup_gene(&q.q)
            .into_iter()
            .map(|(index, name)| GeneHit { index, name })
            .collect(),
    ))
}

/// Normalized, quantized expression block for one gene.
pub fn expression_block(store: &Store, gene: usize) -> ApiResult<Vec<u8>> {
    let (values, _, nnz) = store.fetch_gene_column(gene)?;
    let name = &store.gene_names()[gene];
    let (normalized, info) =
        normalize_expression(name, &values).map_err(|e| ApiError::internal(e.to_string()))?;
    let meta = wire::ExpressionMeta {
        gene_index: gene as u32,
        nonzero_count: nnz,
        normalization: info,
    };
    Ok(wire::encode_expression(&meta, &normalized))
}

async fn expression(
    State(s): State<Shared>,
    Path((id, gene)): Path<(String, String)>,
) -> ApiResult<Response> {
    let d = s.dataset(&id).await?;
    let g = d
        .store
        .resolve_gene(&gene)
        .ok_or_else(|| ApiError::not_found(format!("no gene matching {gene}")))?;
    let bytes = blocking(move || expression_block(&d.store, g)).await??;
    Ok(binary(bytes))
}

async fn markers(
    State(s): State<Shared>,
    Path((id, ann, cat)): Path<(String, String, String)>,
) -> ApiResult<Json<CategoryMarkers>> {
    let d = s.dataset(&id).await?;
    let all = d.store.markers().ok_or_else(|| {
        ApiError::not_found(format!("markers for {id} have not been precomputed"))
            .with_detail(json!({"reason": "not_precomputed", "hint": "precompute"}))
    })?;
    all.get(&ann, &cat)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no category {cat} in annotation {ann}")))
}

#[derive(Deserialize)]
struct NewSession {
    dataset_id: String,
    #[serde(default)]
    embedding: Option<String>,
}

async fn create_session(
    State(s): State<Shared>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let req: NewSession = parse_json(&body)?;
    let d = s.dataset(&req.dataset_id).await?;
    let embedding = match req.embedding {
        Some(e) if d.store.embedding_block(&e).is_some() => e,
        Some(e) => return Err(ApiError::not_found(format!("no embedding named {e}"))),
        None => d
            .store
            .default_embedding()
            .map(|e| e.name.clone())
            .unwrap_or_default(),
    };
    let sid = uuid::Uuid::new_v4().to_string();
    let state = SessionState::new(sid.clone(), d, embedding);
    let info = state.info();
    s.sessions
        .lock()
        .unwrap()
        .insert(sid, Arc::new(AsyncMutex::new(state)));
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_session(
    State(s): State<Shared>,
    Path(sid): Path<String>,
) -> ApiResult<Json<SessionInfo>> {
    let sess = s.session(&sid)?;
    let info = sess.lock().await.info();
    Ok(Json(info))
}

/// Parses a JSON body, reporting failures as `bad_request`.
fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

#[derive(Serialize)]
struct SelectionReply {
    selection_size: usize,
    cells: Vec<u32>,
}

async fn selection(
    State(s): State<Shared>,
    Path(sid): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SelectionReply>> {
    let spec: SelectionSpec = parse_json(&body)?;
    let sess = s.session(&sid)?;
    let mut st = sess.lock().await;
    st.apply(&spec)?;
    Ok(Json(SelectionReply {
        selection_size: st.selection.len(),
        cells: st.selection.selected().to_vec(),
    }))
}

#[derive(Deserialize, Default)]
struct DeRequest {
    #[serde(default)]
    selection: Option<SelectionSpec>,
    #[serde(default)]
    group_label: Option<String>,
}

#[derive(Serialize)]
struct DeReply {
    selection_size: usize,
    table: MarkerTable,
}

async fn de(
    State(s): State<Shared>,
    Path(sid): Path<String>,
    body: Bytes,
) -> ApiResult<Json<DeReply>> {
    let req: DeRequest = if body.iter().all(u8::is_ascii_whitespace) {
        DeRequest::default()
    } else {
        parse_json(&body)?
    };
    let sess = s.session(&sid)?;
    let mut st = sess.lock().await;
    if let Some(spec) = &req.selection {
        st.apply(spec)?;
    }
    let mask = st.selection.clone();
    let d = st.dataset.clone();
    let label = req.group_label.unwrap_or_else(|| "selection".to_string());
    let table = blocking(move || differential_expression(&d.store, &mask, &label)).await??;
    Ok(Json(DeReply {
        selection_size: st.selection.len(),
        table,
    }))
}

async fn view(
    State(s): State<Shared>,
    Path(sid): Path<String>,
    body: Bytes,
) -> ApiResult<Json<cellvista_core::presentation::ViewState>> {
    let action: ViewAction = parse_json(&body)?;
    let sess = s.session(&sid)?;
    let mut st = sess.lock().await;
    if let ViewAction::LoadGeneSet { genes } = &action {
        let n = st.dataset.store.n_genes();
        if let Some(&bad) = genes.iter().find(|&&g| g as usize >= n) {
            return Err(ApiError::bad_request(format!(
                "gene {bad} out of range for {n} genes"
            )));
        }
    }
    st.view = step_view(&st.view, &action);
    Ok(Json(st.view.clone()))
}
