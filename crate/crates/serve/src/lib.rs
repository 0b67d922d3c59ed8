//! Read-only HTTP facade over a directory of label files.
//!
//! Every `*.json` file in the data directory is a label set. An image file
//! with the same stem (`.png`, `.jpg`, `.jpeg`, `.bmp`, `.ppm`, `.webp`) is
//! served from `/raw` when present. All state is loaded and validated up
//! front; nothing mutates afterwards.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use ugs_core::hierarchy::{Click, HierarchyError, PseudoLabelSet, QueryHit, QueryIndex};
use ugs_core::RleMask;

/// Containment threshold enforced on loaded hierarchies.
pub const TAU_OVERLAP: f64 = 0.8;

const IMAGE_TYPES: [(&str, &str); 6] = [
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("bmp", "image/bmp"),
    ("ppm", "image/x-portable-pixmap"),
    ("webp", "image/webp"),
];

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("data directory {0} does not exist")]
    MissingDir(String),
    #[error("data directory {0} holds no label files")]
    EmptyDir(String),
    #[error("invalid label files: {}", .0.join("; "))]
    InvalidFiles(Vec<String>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug)]
pub struct ImageEntry {
    pub index: QueryIndex,
    /// The label file exactly as read from disk.
    pub label_text: String,
    pub label_path: PathBuf,
    pub raw: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ServeState {
    pub root: PathBuf,
    pub images: BTreeMap<String, ImageEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServeError + '_ {
    move |source| ServeError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn raw_for(label: &Path) -> Option<PathBuf> {
    IMAGE_TYPES
        .iter()
        .map(|(ext, _)| label.with_extension(ext))
        .find(|p| p.is_file())
}

fn content_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    IMAGE_TYPES
        .iter()
        .find(|(e, _)| *e == ext)
        .map(|(_, t)| *t)
        .unwrap_or("application/octet-stream")
}

/// Load and validate every label file under `dir`. Any bad file aborts the
/// load; the error lists each one with its problem.
pub fn load_state(dir: &Path) -> Result<ServeState, ServeError> {
    if !dir.is_dir() {
        return Err(ServeError::MissingDir(dir.display().to_string()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ServeError::EmptyDir(dir.display().to_string()));
    }
    let mut images = BTreeMap::new();
    let mut problems = Vec::new();
    for path in paths {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let labels = match PseudoLabelSet::from_json(&text) {
            Ok(l) => l,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        if let Err(e) = labels.validate(TAU_OVERLAP) {
            problems.push(format!("{name}: {e}"));
            continue;
        }
        let id = labels.image_id.clone();
        if images.contains_key(&id) {
            problems.push(format!("{name}: duplicate image id {id}"));
            continue;
        }
        let index = match QueryIndex::new(labels) {
            Ok(i) => i,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        images.insert(
            id,
            ImageEntry {
                index,
                label_text: text,
                raw: raw_for(&path),
                label_path: path,
            },
        );
    }
    if !problems.is_empty() {
        return Err(ServeError::InvalidFiles(problems));
    }
    Ok(ServeState {
        root: dir.to_path_buf(),
        images,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub mask: Option<RleMask>,
    /// The stored granularity of the returned mask, or the requested one when
    /// nothing matched.
    pub granularity: f64,
    pub instance_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskQuery {
    pub x: u32,
    pub y: u32,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub clicks: Vec<Click>,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unknown(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown image id {id}"))
    }
}

impl From<HierarchyError> for ApiError {
    fn from(e: HierarchyError) -> Self {
        let status = match e {
            HierarchyError::PointOutOfBounds { .. }
            | HierarchyError::GranularityOutOfRange(_)
            | HierarchyError::NoPositiveClick => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type Shared = Arc<ServeState>;

fn entry<'a>(state: &'a ServeState, id: &str) -> Result<&'a ImageEntry, ApiError> {
    state.images.get(id).ok_or_else(|| ApiError::unknown(id))
}

fn answer(hit: Option<QueryHit<'_>>, g: f64) -> MaskResponse {
    match hit {
        Some(h) => MaskResponse {
            mask: Some(h.mask.mask.clone()),
            granularity: h.mask.granularity,
            instance_id: Some(h.instance_id),
        },
        None => MaskResponse {
            mask: None,
            granularity: g,
            instance_id: None,
        },
    }
}

async fn list_images(State(state): State<Shared>) -> Json<Vec<ImageInfo>> {
    let list = state
        .images
        .iter()
        .map(|(id, e)| {
            let labels = e.index.labels();
            ImageInfo {
                id: id.clone(),
                width: labels.width,
                height: labels.height,
            }
        })
        .collect();
    Json(list)
}

async fn hierarchy(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let e = entry(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], e.label_text.clone()).into_response())
}

async fn mask(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<MaskQuery>, QueryRejection>,
) -> Result<Json<MaskResponse>, ApiError> {
    let e = entry(&state, &id)?;
    let Query(q) = query?;
    let hit = ugs_core::hierarchy::query_mask(&e.index, q.x, q.y, q.g, &[])?;
    Ok(Json(answer(hit, q.g)))
}

async fn refine(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<RefineRequest>, JsonRejection>,
) -> Result<Json<MaskResponse>, ApiError> {
    let e = entry(&state, &id)?;
    let Json(req) = body?;
    let hit = e.index.query(&req.clicks, req.g)?;
    Ok(Json(answer(hit, req.g)))
}

async fn raw(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let e = entry(&state, &id)?;
    let path = e
        .raw
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no image file for {id}")))?;
    let bytes = tokio::fs::read(path).await.map_err(|err| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {err}", path.display()))
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(path))], bytes).into_response())
}

pub fn router(state: ServeState) -> Router {
    Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}/hierarchy", get(hierarchy))
        .route("/api/images/{id}/mask", get(mask))
        .route("/api/images/{id}/refine", post(refine))
        .route("/api/images/{id}/raw", get(raw))
        .with_state(Arc::new(state))
}

/// Bind and serve until the process is stopped. `on_bound` receives the
/// actual address, which matters when port 0 was requested.
pub async fn serve(state: ServeState, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    log::info!("serving {} images on {bound}", state.images.len());
    on_bound(bound);
    axum::serve(listener, router(state)).await
}
