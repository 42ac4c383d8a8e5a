//! JSON-over-HTTP inference. Images travel as base64 PNG strings.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use stylebank::{image_io, Error, ImageBuffer, StyleBankModel};

use crate::pipeline;

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_MAX_SIDE: usize = 1024;

#[derive(Clone)]
pub struct AppState {
    model: Arc<RwLock<Arc<StyleBankModel>>>,
    max_side: usize,
}

impl AppState {
    pub fn new(model: StyleBankModel, max_side: usize) -> Self {
        Self {
            model: Arc::new(RwLock::new(Arc::new(model))),
            max_side,
        }
    }

    /// Current model. Requests hold their own handle, so a swap never
    /// affects one already running.
    pub fn model(&self) -> Arc<StyleBankModel> {
        self.model.read().expect("model lock poisoned").clone()
    }

    pub fn swap_model(&self, model: StyleBankModel) {
        *self.model.write().expect("model lock poisoned") = Arc::new(model);
    }
}

pub fn router(state: AppState) -> Router {
    // Base64 PNGs at the size cap can run to several megabytes.
    let body_limit = state.max_side * state.max_side * 3 * 2 + (1 << 20);
    Router::new()
        .route("/healthz", get(|| async { StatusCode::OK }))
        .route("/styles", get(styles))
        .route("/stylize", post(stylize))
        .route("/fuse", post(fuse))
        .route("/segment", post(segment))
        .route("/fuse-regions", post(fuse_regions))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
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

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownStyle(_) => StatusCode::NOT_FOUND,
            Error::Image(_) => StatusCode::BAD_REQUEST,
            Error::Mask(_)
            | Error::KMeans(_)
            | Error::InvalidArgument { .. }
            | Error::Shape { .. }
            | Error::DuplicateStyle(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Any parse failure is a 400, whatever the reason.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn decode_b64(field: &str, data: &str) -> ApiResult<Vec<u8>> {
    BASE64
        .decode(data.trim())
        .map_err(|e| ApiError::bad_request(format!("`{field}` is not valid base64: {e}")))
}

fn decode_image(state: &AppState, data: &str) -> ApiResult<ImageBuffer> {
    let img = ImageBuffer::decode_png(&decode_b64("image", data)?)
        .map_err(|e| ApiError::bad_request(format!("`image` is not a readable PNG: {e}")))?;
    if img.width() > state.max_side || img.height() > state.max_side {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {}x{}, limit is {m}x{m}", img.width(), img.height(), m = state.max_side),
        ));
    }
    Ok(img)
}

fn encode_image(img: &ImageBuffer) -> ApiResult<String> {
    Ok(BASE64.encode(img.encode_png()?))
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Serialize, Deserialize)]
pub struct StyleInfo {
    pub name: String,
    pub kernel_size: usize,
}

#[derive(Serialize, Deserialize)]
pub struct StylesResponse {
    pub styles: Vec<StyleInfo>,
}

async fn styles(State(state): State<AppState>) -> Json<StylesResponse> {
    let model = state.model();
    Json(StylesResponse {
        styles: model
            .banks()
            .iter()
            .map(|b| StyleInfo {
                name: b.name.clone(),
                kernel_size: b.kernel_size(),
            })
            .collect(),
    })
}

#[derive(Serialize, Deserialize)]
pub struct StylizeRequest {
    pub image: String,
    pub style: String,
}

#[derive(Serialize, Deserialize)]
pub struct ImageResponse {
    pub image: String,
}

async fn stylize(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<ImageResponse>> {
    let req: StylizeRequest = parse_body(&body)?;
    let img = decode_image(&state, &req.image)?;
    let model = state.model();
    let out = blocking(move || Ok(pipeline::stylize(&model, &img, &req.style)?)).await?;
    Ok(Json(ImageResponse {
        image: encode_image(&out)?,
    }))
}

#[derive(Serialize, Deserialize)]
pub struct FuseRequest {
    pub image: String,
    pub weights: BTreeMap<String, f32>,
}

#[derive(Serialize, Deserialize)]
pub struct FuseResponse {
    pub image: String,
    /// Weights after normalization to sum 1.
    pub weights: BTreeMap<String, f32>,
}

async fn fuse(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<FuseResponse>> {
    let req: FuseRequest = parse_body(&body)?;
    let img = decode_image(&state, &req.image)?;
    let weights: Vec<(String, f32)> = req.weights.into_iter().collect();
    let model = state.model();
    let (out, normalized) = blocking(move || Ok(pipeline::fuse(&model, &img, &weights)?)).await?;
    Ok(Json(FuseResponse {
        image: encode_image(&out)?,
        weights: normalized.into_iter().collect(),
    }))
}

#[derive(Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct SegmentResponse {
    pub labels: String,
    pub k: usize,
}

async fn segment(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<SegmentResponse>> {
    let req: SegmentRequest = parse_body(&body)?;
    let img = decode_image(&state, &req.image)?;
    if req.k == 0 || req.k > 256 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("k = {} must be in 1..=256", req.k)));
    }
    let model = state.model();
    let seg = blocking(move || Ok(pipeline::segment(&model, &img, req.k, req.seed)?)).await?;
    let png = image_io::encode_labels(&seg.labels, seg.width, seg.height)?;
    Ok(Json(SegmentResponse {
        labels: BASE64.encode(png),
        k: seg.k,
    }))
}

#[derive(Serialize, Deserialize)]
pub struct FuseRegionsRequest {
    pub image: String,
    pub labels: String,
    /// Label (as a string key, JSON objects allow nothing else) to style name.
    pub assignment: BTreeMap<String, String>,
}

async fn fuse_regions(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<ImageResponse>> {
    let req: FuseRegionsRequest = parse_body(&body)?;
    let img = decode_image(&state, &req.image)?;
    let (labels, lw, lh) = image_io::decode_labels(&decode_b64("labels", &req.labels)?)
        .map_err(|e| ApiError::bad_request(format!("`labels` is not a readable label map: {e}")))?;
    let assignment = req
        .assignment
        .into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<usize>()
                .map(|k| (k, v))
                .map_err(|_| ApiError::bad_request(format!("assignment key `{k}` is not a label number")))
        })
        .collect::<ApiResult<BTreeMap<_, _>>>()?;
    let model = state.model();
    let out = blocking(move || Ok(pipeline::fuse_regions(&model, &img, &labels, lw, lh, &assignment)?)).await?;
    Ok(Json(ImageResponse {
        image: encode_image(&out)?,
    }))
}

pub async fn serve(state: AppState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
