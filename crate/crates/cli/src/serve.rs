use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fundus_guide::data::{append_annotation, read_manifest, Annotation, ManifestEntry, FINDINGS};
use fundus_guide::geometry::{
    rasterize, region_boundaries, Landmarks, Point, RegionBoundary, RegionPartition,
};
use fundus_guide::{Error, Result};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::commands::ServeArgs;

/// Shared server state: the image manifest, the annotation sink and the
/// label maps produced by `/api/partition`.
pub struct AppState {
    data: PathBuf,
    manifest: Vec<ManifestEntry>,
    annotations: PathBuf,
    write_lock: Mutex<()>,
    label_maps: std::sync::Mutex<HashMap<String, Vec<u8>>>,
}

impl AppState {
    pub fn load(data: &Path, annotations: Option<&Path>) -> Result<Self> {
        let manifest = read_manifest(data)?;
        Ok(AppState {
            data: data.to_path_buf(),
            manifest,
            annotations: annotations
                .map(Path::to_path_buf)
                .unwrap_or_else(|| data.join(fundus_guide::data::ANNOTATION_FILE)),
            write_lock: Mutex::new(()),
            label_maps: std::sync::Mutex::new(HashMap::new()),
        })
    }

    fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.manifest.iter().find(|e| e.image_id == id)
    }
}

pub fn router(state: Arc<AppState>, assets: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/findings", get(findings))
        .route("/api/images", get(list_images))
        .route("/api/images/{id}", get(image_bytes))
        .route("/api/partition", post(partition))
        .route("/api/label-maps/{key}", get(label_map))
        .route("/api/annotations", post(save_annotation))
        .with_state(state);
    match assets {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

pub fn serve_blocking(a: ServeArgs) -> Result<()> {
    let state = Arc::new(AppState::load(&a.data, a.annotations.as_deref())?);
    let app = router(state, a.assets.as_deref());
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Error::io(&a.addr, e))?;
        eprintln!("listening on http://{}", a.addr);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(&a.addr, e))
    })
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_io() && !matches!(e, Error::Format { .. }) {
            StatusCode::INTERNAL_SERVER_ERROR
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        ApiError(status, e.to_string())
    }
}

fn not_found(what: &str, id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
}

async fn findings() -> Json<Vec<&'static str>> {
    Json(FINDINGS.to_vec())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageSummary {
    pub image_id: String,
    pub url: String,
    pub width: usize,
    pub height: usize,
    pub landmarks: Option<LandmarkPair>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LandmarkPair {
    pub od: [f64; 2],
    pub fovea: [f64; 2],
}

async fn list_images(State(s): State<Arc<AppState>>) -> Json<Vec<ImageSummary>> {
    Json(
        s.manifest
            .iter()
            .map(|e| ImageSummary {
                image_id: e.image_id.clone(),
                url: format!("/api/images/{}", e.image_id),
                width: e.landmarks.width,
                height: e.landmarks.height,
                landmarks: Some(LandmarkPair {
                    od: [e.landmarks.optic_disc.x, e.landmarks.optic_disc.y],
                    fovea: [e.landmarks.fovea.x, e.landmarks.fovea.y],
                }),
            })
            .collect(),
    )
}

async fn image_bytes(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Response, ApiError> {
    let entry = s.entry(&id).ok_or_else(|| not_found("image", &id))?;
    let path = s.data.join(&entry.image);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(Error::io(&path, e)))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PartitionRequest {
    pub image_id: String,
    pub od: [f64; 2],
    pub fovea: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PartitionResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub label_map_url: String,
    pub boundary_polylines: Vec<RegionBoundary>,
}

async fn partition(
    State(s): State<Arc<AppState>>,
    Json(req): Json<PartitionRequest>,
) -> std::result::Result<Json<PartitionResponse>, ApiError> {
    let entry = s
        .entry(&req.image_id)
        .ok_or_else(|| not_found("image", &req.image_id))?;
    let (w, h) = (entry.landmarks.width, entry.landmarks.height);
    let lm = Landmarks::new(
        Point::new(req.od[0], req.od[1]),
        Point::new(req.fovea[0], req.fovea[1]),
        w,
        h,
    )?;
    let map = tokio::task::spawn_blocking(move || -> Result<_> {
        rasterize(&RegionPartition::derive(lm)?, w, h)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let mut png = Vec::new();
    map.to_gray()
        .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ApiError::from(Error::from(e)))?;
    let key = format!(
        "{}-{}-{}-{}-{}",
        req.image_id, req.od[0], req.od[1], req.fovea[0], req.fovea[1]
    )
    .replace(|c: char| !c.is_ascii_alphanumeric() && c != '-' && c != '.', "_");
    s.label_maps
        .lock()
        .expect("label map cache poisoned")
        .insert(key.clone(), png);
    Ok(Json(PartitionResponse {
        image_id: req.image_id,
        width: w,
        height: h,
        label_map_url: format!("/api/label-maps/{key}"),
        boundary_polylines: region_boundaries(&map),
    }))
}

async fn label_map(
    State(s): State<Arc<AppState>>,
    UrlPath(key): UrlPath<String>,
) -> std::result::Result<Response, ApiError> {
    let png = s
        .label_maps
        .lock()
        .expect("label map cache poisoned")
        .get(&key)
        .cloned()
        .ok_or_else(|| not_found("label map", &key))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn save_annotation(
    State(s): State<Arc<AppState>>,
    body: Bytes,
) -> std::result::Result<Response, ApiError> {
    let text = std::str::from_utf8(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let ann = Annotation::from_json(text)?;
    if ann.annotator_id.trim().is_empty() {
        return Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            "annotator_id must not be empty".into(),
        ));
    }
    if s.entry(&ann.image_id).is_none() {
        return Err(not_found("image", &ann.image_id));
    }
    {
        let _guard = s.write_lock.lock().await;
        append_annotation(&s.annotations, &ann)?;
    }
    Ok((
        StatusCode::CREATED,
        [(header::CONTENT_TYPE, "application/json")],
        ann.to_json(),
    )
        .into_response())
}
