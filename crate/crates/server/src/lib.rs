//! HTTP session service for interactive segmentation.
//!
//! Each session owns one [`SessionContext`]. Requests on a session are
//! serialized in arrival order; the segmentation work runs on the blocking
//! pool so that other sessions and health checks stay responsive.

pub mod api;
pub mod cli;

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use log::info;
use tokio::sync::{Mutex, RwLock};

use m2n2::mask::BinaryMask;
use m2n2::segmenter::{Segmentation, SessionContext};
use m2n2::tensor_io::read_attention_from;
use m2n2::world::SyntheticWorld;
use m2n2::{Error as CoreError, GuideImage};

pub use api::*;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub max_body_bytes: usize,
    /// Pixels per attention cell for synthetic sessions without an image.
    pub synthetic_pixels_per_cell: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl: Duration::from_secs(30 * 60),
            max_body_bytes: 256 << 20,
            synthetic_pixels_per_cell: 8,
        }
    }
}

struct SessionState {
    ctx: SessionContext,
    segmentation: Segmentation,
}

struct SessionEntry {
    state: Arc<Mutex<SessionState>>,
    last_used: StdMutex<Instant>,
}

impl SessionEntry {
    fn touch(&self) {
        *self.last_used.lock().expect("clock lock") = Instant::now();
    }
}

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<SessionEntry>>>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            sessions: Arc::new(RwLock::new(HashMap::new())),
            config: Arc::new(config),
        }
    }

    pub async fn session_count(&self) -> usize {
        self.sessions.read().await.len()
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub async fn reap_expired(&self) -> usize {
        let ttl = self.config.session_ttl;
        let mut sessions = self.sessions.write().await;
        let before = sessions.len();
        sessions.retain(|_, e| e.last_used.lock().expect("clock lock").elapsed() <= ttl);
        before - sessions.len()
    }

    async fn entry(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        let entry = self.sessions.read().await.get(id).cloned().ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, format!("unknown session '{id}'"))
        })?;
        entry.touch();
        Ok(entry)
    }
}

/// Periodically removes expired sessions.
pub fn spawn_reaper(state: AppState) -> tokio::task::JoinHandle<()> {
    let period = (state.config.session_ttl / 4).max(Duration::from_millis(100));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = state.reap_expired().await;
            if n > 0 {
                info!("expired {n} idle session(s)");
            }
        }
    })
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/clicks", post(click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/mask.png", get(mask_png))
        .route("/sessions/{id}/diagnostics", get(diagnostics))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

async fn healthz() -> &'static str {
    "ok"
}

fn decode_base64(field: &str, data: &str) -> Result<Vec<u8>, ApiError> {
    BASE64.decode(data.trim()).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("{field} is not valid base64: {e}"),
        )
    })
}

fn build_context(
    req: CreateSessionRequest,
    config: &ServiceConfig,
) -> Result<SessionContext, ApiError> {
    let session_config = req.config.unwrap_or_default();
    session_config.validate().map_err(ApiError::unprocessable)?;
    let image = match &req.image {
        Some(data) => {
            let bytes = decode_base64("image", data)?;
            let img = image::load_from_memory(&bytes)
                .map_err(|e| ApiError::unprocessable(format!("image does not decode: {e}")))?;
            Some(GuideImage::from_rgb_image(&img.to_rgb8()))
        }
        None => None,
    };
    let (stack, guide) = match req.attention {
        AttentionSource::Atn1 { data } => {
            let bytes = decode_base64("attention", &data)?;
            let stack = read_attention_from(Cursor::new(bytes)).map_err(ApiError::unprocessable)?;
            let guide = image.ok_or_else(|| {
                ApiError::unprocessable("an image is required with an attention file")
            })?;
            (stack, guide)
        }
        AttentionSource::Synthetic { spec } => {
            let world = SyntheticWorld::from_spec(spec, config.synthetic_pixels_per_cell)
                .map_err(ApiError::unprocessable)?;
            (world.stack, image.unwrap_or(world.guide))
        }
    };
    SessionContext::new(&stack, req.weights.as_ref(), guide, session_config)
        .map_err(ApiError::unprocessable)
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let config = Arc::clone(&state.config);
    let ctx = tokio::task::spawn_blocking(move || build_context(req, &config))
        .await
        .map_err(ApiError::internal)??;
    let segmentation = ctx.segment().map_err(ApiError::internal)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let created = SessionCreated {
        id: id.clone(),
        width: ctx.width(),
        height: ctx.height(),
        grid_h: ctx.matrix().h(),
        grid_w: ctx.matrix().w(),
        method: ctx.config().method.to_string(),
    };
    let entry = Arc::new(SessionEntry {
        state: Arc::new(Mutex::new(SessionState { ctx, segmentation })),
        last_used: StdMutex::new(Instant::now()),
    });
    state.sessions.write().await.insert(id, entry);
    Ok((StatusCode::CREATED, Json(created)))
}

fn lambdas_of(seg: &Segmentation) -> BTreeMap<String, f64> {
    seg.per_point_lambda
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect()
}

fn snapshot(id: &str, s: &SessionState) -> SessionSnapshot {
    SessionSnapshot {
        id: id.to_string(),
        width: s.ctx.width(),
        height: s.ctx.height(),
        points: s.ctx.points().to_vec(),
        mask: s.segmentation.mask.to_rle(),
        lambdas: lambdas_of(&s.segmentation),
        cache_entries: s.ctx.cache_len(),
    }
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionSnapshot>, ApiError> {
    let entry = state.entry(&id).await?;
    let guard = entry.state.lock().await;
    Ok(Json(snapshot(&id, &guard)))
}

async fn delete_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    match state.sessions.write().await.remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown session '{id}'"),
        )),
    }
}

fn response_of(s: &SessionState, timing: Timing) -> SegmentResponse {
    SegmentResponse {
        points: s.ctx.points().to_vec(),
        mask: s.segmentation.mask.to_rle(),
        lambdas: lambdas_of(&s.segmentation),
        cache_entries: s.ctx.cache_len(),
        timing,
    }
}

async fn click(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> Result<Json<SegmentResponse>, ApiError> {
    let entry = state.entry(&id).await?;
    // The owned guard keeps the session locked while the blocking task runs;
    // tokio's mutex hands it out in arrival order.
    let mut guard = Arc::clone(&entry.state).lock_owned().await;
    let resp = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let s = &mut *guard;
        if req.x >= s.ctx.width() || req.y >= s.ctx.height() {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!(
                    "click ({}, {}) outside the {}x{} image",
                    req.x,
                    req.y,
                    s.ctx.width(),
                    s.ctx.height()
                ),
            ));
        }
        s.ctx
            .add_point(req.x, req.y, req.label)
            .map_err(|e| match e {
                CoreError::Validation(m) => ApiError::new(StatusCode::BAD_REQUEST, m),
                other => ApiError::internal(other),
            })?;
        let map_done = Instant::now();
        match s.ctx.segment() {
            Ok(seg) => s.segmentation = seg,
            Err(e) => {
                let _ = s.ctx.remove_last_point();
                return Err(ApiError::internal(e));
            }
        }
        let end = Instant::now();
        Ok(response_of(
            s,
            Timing {
                map_ms: (map_done - start).as_secs_f64() * 1e3,
                segment_ms: (end - map_done).as_secs_f64() * 1e3,
                total_ms: (end - start).as_secs_f64() * 1e3,
            },
        ))
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(resp))
}

async fn undo(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SegmentResponse>, ApiError> {
    let entry = state.entry(&id).await?;
    let mut guard = Arc::clone(&entry.state).lock_owned().await;
    let resp = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let s = &mut *guard;
        s.ctx
            .remove_last_point()
            .map_err(|e| ApiError::new(StatusCode::CONFLICT, e.to_string()))?;
        s.segmentation = s.ctx.segment().map_err(ApiError::internal)?;
        let total_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(response_of(
            s,
            Timing {
                map_ms: 0.0,
                segment_ms: total_ms,
                total_ms,
            },
        ))
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(resp))
}

pub fn encode_png(mask: &BinaryMask) -> Result<Vec<u8>, image::ImageError> {
    let mut bytes = Vec::new();
    mask.to_image()
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

async fn mask_png(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let entry = state.entry(&id).await?;
    let mask = entry.state.lock().await.segmentation.mask.clone();
    let bytes = encode_png(&mask).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn diagnostics(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Diagnostics>, ApiError> {
    let entry = state.entry(&id).await?;
    let guard = Arc::clone(&entry.state).lock_owned().await;
    let curves = tokio::task::spawn_blocking(move || guard.ctx.score_curves())
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok(Json(Diagnostics { curves }))
}
