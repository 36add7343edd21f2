//! Axum service exposing `POST /inpaint` and `GET /healthz`.
//!
//! Payload shapes and status codes are documented on [`pennet_core::wire`].

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pennet_core::checkpoint::{load_checkpoint, model_id};
use pennet_core::wire::{decode_base64, encode_base64, ErrorBody, Health, InpaintRequest, InpaintResponse};
use pennet_core::Generator;
use tokio::net::TcpListener;
use tracing::{error, info};

/// Largest accepted request body.
pub const BODY_LIMIT: usize = 64 << 20;

/// Environment variable naming the default checkpoint.
pub const CHECKPOINT_ENV: &str = "PENNET_CHECKPOINT";

pub struct LoadedModel {
    pub generator: Generator,
    pub model_id: String,
}

impl LoadedModel {
    pub fn from_checkpoint(path: &Path) -> pennet_core::Result<Self> {
        let state = load_checkpoint(path)?;
        Ok(LoadedModel {
            model_id: model_id(&state),
            generator: state.generator,
        })
    }
}

/// Shared read-only model slot; empty until a checkpoint finishes loading.
#[derive(Clone, Default)]
pub struct AppState {
    model: Arc<RwLock<Option<Arc<LoadedModel>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_model(model: LoadedModel) -> Self {
        let s = Self::new();
        s.set_model(model);
        s
    }

    pub fn set_model(&self, model: LoadedModel) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock poisoned").clone()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<pennet_core::Error> for ApiError {
    fn from(e: pennet_core::Error) -> Self {
        use pennet_core::Error as E;
        let status = match e {
            E::Shape(_) | E::Codec(_) | E::Image { .. } | E::NonBinaryMask(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> (StatusCode, Json<Health>) {
    match state.model() {
        Some(m) => (
            StatusCode::OK,
            Json(Health {
                status: "ready".into(),
                model_id: Some(m.model_id.clone()),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "loading".into(),
                model_id: None,
            }),
        ),
    }
}

struct Payload {
    image: Vec<u8>,
    mask: Vec<u8>,
    checkpoint_id: Option<String>,
}

async fn read_payload(req: Request) -> Result<Payload, ApiError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let (mut image, mut mask, mut checkpoint_id) = (None, None, None);
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?
        {
            let name = field.name().unwrap_or_default().to_string();
            let data = field
                .bytes()
                .await
                .map_err(|e| ApiError::bad_request(e.body_text()))?;
            match name.as_str() {
                "image" => image = Some(data.to_vec()),
                "mask" => mask = Some(data.to_vec()),
                "checkpoint_id" => {
                    checkpoint_id = Some(String::from_utf8_lossy(&data).trim().to_string())
                }
                other => return Err(ApiError::bad_request(format!("unknown field `{other}`"))),
            }
        }
        Ok(Payload {
            image: image.ok_or_else(|| ApiError::bad_request("missing `image` part"))?,
            mask: mask.ok_or_else(|| ApiError::bad_request("missing `mask` part"))?,
            checkpoint_id,
        })
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let r: InpaintRequest = serde_json::from_slice(&body)
            .map_err(|e| ApiError::bad_request(format!("invalid JSON request: {e}")))?;
        let decode = |field: &str, text: &str| {
            decode_base64(text).map_err(|e| ApiError::bad_request(format!("`{field}` is not base64: {e}")))
        };
        Ok(Payload {
            image: decode("image", &r.image)?,
            mask: decode("mask", &r.mask)?,
            checkpoint_id: r.checkpoint_id,
        })
    }
}

async fn inpaint(State(state): State<AppState>, req: Request) -> Result<Json<InpaintResponse>, ApiError> {
    let start = Instant::now();
    let model = state
        .model()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))?;
    let payload = read_payload(req).await?;
    if let Some(id) = payload.checkpoint_id.as_deref().filter(|id| !id.is_empty()) {
        if id != model.model_id {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("checkpoint `{id}` is not loaded; serving `{}`", model.model_id),
            ));
        }
    }
    let worker = model.clone();
    let (png, width, height) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let img = pennet_core::data::decode_rgb(&payload.image)?;
        let mask = pennet_core::data::decode_mask(&payload.mask)?;
        let out = pennet_core::inpaint::inpaint_rgb(&worker.generator, &img, &mask)?;
        let png = pennet_core::data::encode_png_rgb(&out)?;
        Ok((png, out.width(), out.height()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    info!(latency_ms, width, height, model_id = %model.model_id, "inpaint");
    Ok(Json(InpaintResponse {
        result: encode_base64(&png),
        latency_ms,
        model_id: model.model_id.clone(),
        width,
        height,
    }))
}

/// Loads `checkpoint` in the background and serves on `listener` until
/// `shutdown` resolves. Health checks answer 503 until loading finishes.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    checkpoint: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Some(path) = checkpoint {
        let slot = state.clone();
        tokio::task::spawn_blocking(move || match LoadedModel::from_checkpoint(&path) {
            Ok(m) => {
                info!(model_id = %m.model_id, path = %path.display(), "model loaded");
                slot.set_model(m);
            }
            Err(e) => error!(path = %path.display(), error = %e, "failed to load checkpoint"),
        });
    }
    let addr: SocketAddr = listener.local_addr()?;
    info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
