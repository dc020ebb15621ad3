use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use radiomae::checkpoint::read_meta;
use radiomae::datamodel::decode_bytes;
use radiomae::multihead::{
    predict_image, Detection, DetectionProposer, ImagePrediction, Malignancy, MultiheadModel, RegionProposer, Thresholds,
    HEAD_LOCATION,
};
use radiomae::synthgen::LOCATION_CLASSES;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const SCHEMA_VERSION: &str = "1.0";
pub const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;
/// Published response schema.
pub const PREDICT_SCHEMA: &str = include_str!("../schema/predict_response.schema.json");
const LOCATION_TOP_K: usize = 3;

/// Read-only state shared by every request.
pub struct AppState {
    pub model: MultiheadModel,
    pub proposer: Box<dyn RegionProposer>,
    pub model_version: String,
}

impl AppState {
    pub fn load(checkpoint: &Path, proposer: Box<dyn RegionProposer>) -> radiomae::Result<Self> {
        let model = MultiheadModel::load(checkpoint)?;
        let meta = read_meta(checkpoint)?;
        let name = checkpoint
            .canonicalize()
            .ok()
            .and_then(|p| p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "model".into());
        Ok(Self {
            model,
            proposer,
            model_version: format!("{name}@epoch{}-step{}", meta.epoch, meta.step),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScore {
    pub index: usize,
    pub class: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionResponse {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
    /// Class reported by the proposer, when it has one.
    pub proposed_location: Option<usize>,
    pub location_top_k: Vec<LocationScore>,
    pub probabilities: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLevel {
    pub tumor_positive: bool,
    pub malignancy: Malignancy,
    pub max_p_malignant: f64,
    pub fracture: bool,
    pub implant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub schema_version: String,
    pub model_version: String,
    pub image_id: String,
    /// `[height, width]` of the decoded upload.
    pub image_size: [usize; 2],
    pub regions: Vec<RegionResponse>,
    pub image_level: ImageLevel,
    pub thresholds: Thresholds,
    pub warnings: Vec<String>,
}

fn top_k(p: &[f64], k: usize) -> Vec<LocationScore> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| LocationScore {
            index: i,
            class: LOCATION_CLASSES.get(i).map_or_else(|| i.to_string(), |s| s.to_string()),
            p: p[i],
        })
        .collect()
}

pub fn to_response(pred: ImagePrediction, image_id: String, size: [usize; 2], model_version: &str, warnings: Vec<String>) -> PredictResponse {
    let max_p_malignant = pred
        .regions
        .iter()
        .filter_map(|r| r.p_malignant().ok())
        .fold(0.0, f64::max);
    let regions = pred
        .regions
        .into_iter()
        .map(|r| {
            let b = r.region.bbox;
            RegionResponse {
                bbox: [b.x, b.y, b.w, b.h],
                confidence: r.region.confidence,
                proposed_location: r.region.location_class,
                location_top_k: r.probabilities.get(HEAD_LOCATION).map_or_else(Vec::new, |p| top_k(p, LOCATION_TOP_K)),
                probabilities: r.probabilities,
            }
        })
        .collect();
    PredictResponse {
        schema_version: SCHEMA_VERSION.into(),
        model_version: model_version.into(),
        image_id,
        image_size: size,
        regions,
        image_level: ImageLevel {
            tumor_positive: pred.tumor_positive,
            malignancy: pred.malignancy,
            max_p_malignant,
            fracture: pred.fracture,
            implant: pred.implant,
        },
        thresholds: pred.thresholds,
        warnings,
    }
}

pub enum ApiError {
    BadRequest(String),
    TooLarge,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(reason) => (StatusCode::BAD_REQUEST, Json(json!({"error": reason}))).into_response(),
            ApiError::TooLarge => (
                StatusCode::PAYLOAD_TOO_LARGE,
                Json(json!({"error": format!("upload exceeds {MAX_UPLOAD_BYTES} bytes")})),
            )
                .into_response(),
            ApiError::Internal(detail) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("request {id} failed: {detail}");
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": "internal error", "id": id}))).into_response()
            }
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct PredictQuery {
    /// Decision threshold for the server-side boolean labels.
    pub threshold: Option<f64>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "model_version": state.model_version}))
}

async fn version(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "service": env!("CARGO_PKG_VERSION"),
        "schema_version": SCHEMA_VERSION,
        "model_version": state.model_version,
    }))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::TooLarge
    } else {
        ApiError::BadRequest(format!("malformed multipart body: {}", e.body_text()))
    }
}

/// Multipart fields: `image` (PNG/JPEG, required), `id` (optional text) and
/// `regions` (optional JSON list of detections for this image).
async fn predict(
    State(state): State<Arc<AppState>>,
    Query(q): Query<PredictQuery>,
    mut form: Multipart,
) -> Result<Json<PredictResponse>, ApiError> {
    let mut thresholds = Thresholds::default();
    if let Some(t) = q.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(ApiError::BadRequest(format!("threshold {t} outside [0, 1]")));
        }
        thresholds.malignant = t;
        thresholds.implant = t;
    }
    thresholds.trigger = state.model.trigger;
    let (mut bytes, mut id, mut regions) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        match field.name() {
            Some("image") => bytes = Some(field.bytes().await.map_err(multipart_error)?),
            Some("id") => id = Some(field.text().await.map_err(multipart_error)?),
            Some("regions") => {
                let text = field.text().await.map_err(multipart_error)?;
                let list: Vec<Detection> = serde_json::from_str(&text)
                    .map_err(|e| ApiError::BadRequest(format!("regions field: {e}")))?;
                regions = Some(list);
            }
            _ => {}
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::BadRequest("missing multipart field \"image\"".into()))?;
    if bytes.len() > MAX_UPLOAD_BYTES {
        return Err(ApiError::TooLarge);
    }
    let image_id = id.unwrap_or_else(|| "upload".into());
    let result = tokio::task::spawn_blocking(move || -> Result<PredictResponse, ApiError> {
        let image = decode_bytes(&bytes).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let size = [image.height(), image.width()];
        let inline;
        let proposer: &dyn RegionProposer = match regions {
            Some(list) => {
                inline = DetectionProposer::new([(image_id.clone(), list)].into_iter().collect(), 0.0);
                &inline
            }
            None => state.proposer.as_ref(),
        };
        let (pred, warnings) = predict_image(&state.model, &image, Some(&image_id), proposer, thresholds)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(to_response(pred, image_id, size, &state.model_version, warnings))
    })
    .await
    .map_err(|e| ApiError::Internal(format!("inference task: {e}")))??;
    Ok(Json(result))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .route("/version", get(version))
        // headroom for multipart framing; the image itself is checked exactly
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + 64 * 1024))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
