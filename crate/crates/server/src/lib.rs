//! HTTP inference service: `POST /predict` (WAV bytes in, per-rule
//! probabilities out), `GET /health` and `GET /rules`.
//!
//! The model is loaded once and shared read-only behind an `RwLock`; swapping
//! the checkpoint takes the writer side, so in-flight predictions drain first.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tajweed_core::audio::decode_wav;
use tajweed_core::dsp::{preprocess_waveform, DspConfig};
use tajweed_core::model::{load_checkpoint, TajweedNet};
use tajweed_core::rules::RULES;
use tajweed_core::trainer::{predict_batch, stack_inputs};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const MIN_DURATION_S: f64 = 0.25;
pub const MAX_DURATION_S: f64 = 30.0;
/// Large enough for 30 s of 48 kHz stereo 32-bit audio; the duration check is
/// the binding limit.
pub const MAX_BODY_BYTES: usize = 12 * 1024 * 1024;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const WAV_CONTENT_TYPES: [&str; 4] = ["audio/wav", "audio/x-wav", "audio/wave", "audio/vnd.wave"];

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] tajweed_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid allowed origin {0:?}")]
    Origin(String),
}

/// A checkpoint ready to serve.
pub struct LoadedModel {
    pub net: TajweedNet,
    pub model_id: String,
    pub dsp: DspConfig,
    pub dsp_hash: String,
}

impl LoadedModel {
    pub fn load(path: &Path) -> tajweed_core::Result<Self> {
        let ckpt = load_checkpoint(path)?;
        Ok(Self {
            net: ckpt.net,
            model_id: ckpt.model_id,
            dsp_hash: ckpt.header.dsp.hash(),
            dsp: ckpt.header.dsp,
        })
    }
}

pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    load_error: RwLock<Option<String>>,
    started: Instant,
    threshold: f64,
}

impl AppState {
    /// Starts degraded when `checkpoint` is absent or fails to load.
    pub fn new(checkpoint: Option<&Path>, threshold: f64) -> Self {
        let state = Self {
            model: RwLock::new(None),
            load_error: RwLock::new(Some("no checkpoint configured".into())),
            started: Instant::now(),
            threshold,
        };
        if let Some(path) = checkpoint {
            if let Err(e) = state.swap_checkpoint(path) {
                tracing::warn!(error = %e, "starting without a model");
            }
        }
        state
    }

    pub fn with_model(model: LoadedModel, threshold: f64) -> Self {
        Self {
            model: RwLock::new(Some(Arc::new(model))),
            load_error: RwLock::new(None),
            started: Instant::now(),
            threshold,
        }
    }

    /// Loads `path` and replaces the served model; on failure the previous
    /// model (if any) keeps serving.
    pub fn swap_checkpoint(&self, path: &Path) -> tajweed_core::Result<String> {
        match LoadedModel::load(path) {
            Ok(m) => {
                let id = m.model_id.clone();
                *self.model.write().expect("model lock") = Some(Arc::new(m));
                *self.load_error.write().expect("error lock") = None;
                tracing::info!(model_id = %id, path = %path.display(), "checkpoint loaded");
                Ok(id)
            }
            Err(e) => {
                *self.load_error.write().expect("error lock") = Some(format!("{}: {e}", path.display()));
                Err(e)
            }
        }
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// First 16 hex digits of the SHA-256 of the uploaded bytes.
    pub clip_token: String,
    /// In rule order (see `/rules`).
    pub probabilities: [f64; 3],
    pub verdicts: [bool; 3],
    pub model_id: String,
    pub dsp_config_hash: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: Option<String>,
    pub uptime_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleInfo {
    pub index: usize,
    pub column: String,
    pub name: String,
    pub short: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulesResponse {
    pub rules: Vec<RuleInfo>,
    pub ordering: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub detail: String,
}

fn reject(status: StatusCode, error: &str, detail: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            error: error.into(),
            detail: detail.into(),
        }),
    )
        .into_response()
}

pub fn rules_response() -> RulesResponse {
    RulesResponse {
        rules: RULES
            .iter()
            .enumerate()
            .map(|(index, r)| RuleInfo {
                index,
                column: r.column.into(),
                name: r.name.into(),
                short: r.short.into(),
                description: r.description.into(),
            })
            .collect(),
        ordering: "probabilities[i] and verdicts[i] refer to rules[i]; the order follows the \
                   label columns of the corpus and changes only with a new API version"
            .into(),
    }
}

async fn rules() -> Json<RulesResponse> {
    Json(rules_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let uptime_s = state.started.elapsed().as_secs_f64();
    match state.model() {
        Some(m) => Json(Health {
            status: "ready".into(),
            model_id: Some(m.model_id.clone()),
            uptime_s,
            detail: None,
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "degraded".into(),
                model_id: None,
                uptime_s,
                detail: state.load_error.read().expect("error lock").clone(),
            }),
        )
            .into_response(),
    }
}

fn is_wav_content_type(req: &Request) -> bool {
    req.headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.split(';').next().unwrap_or("").trim().to_ascii_lowercase())
        .is_some_and(|v| WAV_CONTENT_TYPES.contains(&v.as_str()))
}

/// Decodes, validates and classifies one upload; pure apart from the model.
pub fn predict_bytes(model: &LoadedModel, bytes: &[u8], threshold: f64) -> Result<Prediction, Response> {
    let wav = decode_wav(bytes)
        .map_err(|e| reject(StatusCode::BAD_REQUEST, "undecodable", e.to_string()))?;
    let duration_s = wav.duration_s();
    if duration_s < MIN_DURATION_S {
        return Err(reject(
            StatusCode::BAD_REQUEST,
            "too short",
            format!("clip is {duration_s:.3} s; the minimum is {MIN_DURATION_S} s"),
        ));
    }
    if duration_s > MAX_DURATION_S {
        return Err(reject(
            StatusCode::BAD_REQUEST,
            "too long",
            format!("clip is {duration_s:.3} s; the maximum is {MAX_DURATION_S} s"),
        ));
    }
    let internal = |e: tajweed_core::Error| reject(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string());
    let tensor = preprocess_waveform(&wav, &model.dsp)
        .map_err(|e| reject(StatusCode::BAD_REQUEST, "undecodable", e.to_string()))?;
    let x = stack_inputs(&[tensor], model.net.device()).map_err(internal)?;
    let p = predict_batch(&model.net, &x, threshold).map_err(internal)?[0];
    Ok(Prediction {
        clip_token: hex::encode(&Sha256::digest(bytes)[..8]),
        probabilities: p.probabilities,
        verdicts: p.verdicts,
        model_id: model.model_id.clone(),
        dsp_config_hash: model.dsp_hash.clone(),
        duration_s,
    })
}

async fn predict(State(state): State<Arc<AppState>>, req: Request) -> Response {
    if !is_wav_content_type(&req) {
        return reject(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported media type",
            format!("send the clip as one of {}", WAV_CONTENT_TYPES.join(", ")),
        );
    }
    let Some(model) = state.model() else {
        return reject(StatusCode::SERVICE_UNAVAILABLE, "model not loaded", "the service is degraded");
    };
    let bytes: Bytes = match axum::body::to_bytes(req.into_body(), MAX_BODY_BYTES).await {
        Ok(b) => b,
        Err(_) => {
            return reject(
                StatusCode::BAD_REQUEST,
                "too long",
                format!("upload exceeds {MAX_BODY_BYTES} bytes"),
            )
        }
    };
    let threshold = state.threshold;
    let result = tokio::task::spawn_blocking(move || predict_bytes(&model, &bytes, threshold)).await;
    match result {
        Ok(Ok(p)) => Json(p).into_response(),
        Ok(Err(resp)) => resp,
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

/// Builds the router; `allowed_origin` enables CORS for that one origin.
pub fn router(state: Arc<AppState>, allowed_origin: Option<&str>) -> Result<Router, ServiceError> {
    let mut app = Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .route("/rules", get(rules))
        .with_state(state);
    if let Some(origin) = allowed_origin {
        let value = HeaderValue::from_str(origin).map_err(|_| ServiceError::Origin(origin.into()))?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::predicate(move |o: &HeaderValue, _| *o == value))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub addr: SocketAddr,
    pub allowed_origin: Option<String>,
    pub threshold: f64,
}

/// Runs until `shutdown` resolves.
pub async fn serve(
    cfg: &ServeConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::new(cfg.checkpoint.as_deref(), cfg.threshold));
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    serve_on(listener, state, cfg.allowed_origin.as_deref(), shutdown).await
}

/// Serves on an already bound listener (port 0 in tests).
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    allowed_origin: Option<&str>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = router(state, allowed_origin)?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
