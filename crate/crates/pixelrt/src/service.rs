//! JSON-over-HTTP session service.
//!
//! Model weights are shared read-only; each session sits behind its own
//! async mutex, so turns on one session run one at a time in arrival order
//! while different sessions proceed concurrently.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use pixelrt_core::mask::{RleMask, SpatioTemporalMask};
use pixelrt_core::Error;
use pixelrt_model::clip::VideoClip;
use pixelrt_model::memory::Session;
use pixelrt_model::model::{PixelModel, TurnOutput};
use pixelrt_model::prompt::{PromptJson, VisualPrompt};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub capacity: usize,
    pub idle_timeout: Duration,
    pub max_frames: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            capacity: 128,
            idle_timeout: Duration::from_secs(30 * 60),
            max_frames: 64,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`"))
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        use Error::*;
        let (status, code) = match &e {
            Upload(_) | Image(_) | NoFrame | TooSmall { .. } => (StatusCode::BAD_REQUEST, "upload"),
            Range(_) | Precondition(_) | EmptyPrompt | MalformedRle(_) | Shape(_) | InvalidTarget(_) => {
                (StatusCode::BAD_REQUEST, "validation")
            }
            UnknownObject(_) | DanglingReference(_) => (StatusCode::BAD_REQUEST, "unknown_object"),
            SequenceLength { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "sequence_length"),
            BankFull(_) => (StatusCode::CONFLICT, "bank_full"),
            MalformedResponse(_) | PrefillArity { .. } | NothingToInject | UnresolvedSlot { .. } | OmittedObject(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "model")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": {"code": self.code, "message": self.message, "field": self.field}
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct SessionEntry {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Mutex<Instant>,
}

impl SessionEntry {
    fn touch(&self) {
        *self.last_used.lock().unwrap() = Instant::now();
    }
}

struct Inner {
    model: Arc<PixelModel>,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<SessionEntry>>>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(model: PixelModel, cfg: ServiceConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                model: Arc::new(model),
                cfg,
                sessions: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().unwrap().len()
    }

    /// Drops sessions idle longer than the timeout; busy ones are kept.
    pub fn purge_expired(&self) -> usize {
        let timeout = self.inner.cfg.idle_timeout;
        let mut map = self.inner.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, e| e.last_used.lock().unwrap().elapsed() < timeout || e.session.try_lock().is_err());
        before - map.len()
    }

    fn get(&self, id: &str) -> ApiResult<Arc<SessionEntry>> {
        let e = self
            .inner
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))?;
        e.touch();
        Ok(e)
    }
}

pub fn router(state: AppState, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/ask", post(ask))
        .route("/sessions/{id}/memory", get(memory))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .layer(DefaultBodyLimit::max(256 << 20))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") }),
    }
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "sessions": state.session_count(),
        "parameters": state.inner.model.store.count_scalars(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub frames: usize,
    /// `[height, width]`.
    pub frame_size: [usize; 2],
    pub memory_size: usize,
}

/// Frames arrive as repeated `frames` file parts, in clip order.
async fn create_session(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<(StatusCode, Json<CreatedSession>)> {
    let mut frames: Vec<Bytes> = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "upload", e.to_string()))?
    {
        match field.name() {
            Some("frames") | Some("frame") => {}
            other => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "upload",
                    format!("unexpected form field {other:?}; send frames as `frames`"),
                )
                .field(other.unwrap_or_default().to_string()))
            }
        }
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "upload", e.to_string()))?;
        frames.push(bytes);
    }
    let max = state.inner.cfg.max_frames;
    if frames.is_empty() || frames.len() > max {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "upload",
            format!("{} frames uploaded, expected 1 to {max}", frames.len()),
        )
        .field("frames"));
    }
    let clip = tokio::task::spawn_blocking(move || VideoClip::decode(&frames))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::from(e).field("frames"))?;
    state.purge_expired();
    let id = uuid::Uuid::new_v4().simple().to_string();
    let size = clip.frame_size();
    let n = clip.len();
    {
        let mut map = state.inner.sessions.lock().unwrap();
        if map.len() >= state.inner.cfg.capacity {
            return Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "capacity",
                format!("all {} session slots are in use", state.inner.cfg.capacity),
            ));
        }
        map.insert(
            id.clone(),
            Arc::new(SessionEntry {
                session: Arc::new(tokio::sync::Mutex::new(Session::new(id.clone(), Arc::new(clip)))),
                last_used: Mutex::new(Instant::now()),
            }),
        );
    }
    tracing::info!(session = %id, frames = n, "session created");
    Ok((
        StatusCode::CREATED,
        Json(CreatedSession {
            session_id: id,
            frames: n,
            frame_size: [size.height, size.width],
            memory_size: 0,
        }),
    ))
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub question: String,
    #[serde(default)]
    pub prompts: Vec<PromptJson>,
    #[serde(default = "yes")]
    pub want_masks: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectJson {
    pub object_id: u32,
    pub visible_frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_pred: Option<f64>,
    /// Frame index → RLE, present when masks were requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<BTreeMap<usize, RleMask>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_response: Option<String>,
    pub objects: Vec<ObjectJson>,
    pub decoder_tokens: usize,
    pub timing: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryResponse {
    pub session_id: String,
    pub capacity: usize,
    pub n_prompts: usize,
    pub n_segmented: usize,
    pub objects: Vec<MemoryObjectJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryObjectJson {
    pub object_id: u32,
    pub visible_frames: Vec<usize>,
    /// Frames with a pooled feature, once the object has been injected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_frames: Option<Vec<usize>>,
    pub masks: BTreeMap<usize, RleMask>,
}

fn object_json(object_id: u32, mask: &SpatioTemporalMask, iou_pred: Option<f64>, with_masks: bool) -> ObjectJson {
    ObjectJson {
        object_id,
        visible_frames: mask.visible_frames(),
        iou_pred,
        masks: with_masks.then(|| mask.to_rle_map()),
    }
}

fn parse_ask(body: &[u8], clip: &VideoClip) -> ApiResult<(AskRequest, Vec<VisualPrompt>)> {
    let req: AskRequest =
        serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("request body: {e}")))?;
    if req.question.trim().is_empty() {
        return Err(ApiError::validation("question is empty").field("question"));
    }
    let prompts = req
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.validate(clip.len(), clip.frame_size())
                .map_err(|e| ApiError::validation(e.message).field(format!("prompts[{i}].{}", e.field)))
        })
        .collect::<ApiResult<Vec<_>>>()?;
    Ok((req, prompts))
}

async fn ask(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<AskResponse>> {
    let entry = state.get(&id)?;
    let mut session = entry.session.clone().lock_owned().await;
    let (req, prompts) = parse_ask(&body, &session.clip)?;
    let model = state.inner.model.clone();
    let out = tokio::task::spawn_blocking(move || {
        let out = model.run_turn(&mut session, &req.question, &prompts);
        (out, req.want_masks)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    entry.touch();
    let (out, want_masks) = out;
    Ok(Json(ask_response(out?, want_masks)))
}

pub fn ask_response(out: TurnOutput, want_masks: bool) -> AskResponse {
    AskResponse {
        answer: out.answer,
        prefill_response: out.prefill_response,
        objects: out
            .objects
            .iter()
            .map(|o| object_json(o.object_id, &o.mask, Some(o.iou_pred), want_masks))
            .collect(),
        decoder_tokens: out.decoder_tokens,
        timing: out.timing,
    }
}

async fn memory(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<MemoryResponse>> {
    let entry = state.get(&id)?;
    let session = entry.session.lock().await;
    Ok(Json(MemoryResponse {
        session_id: session.id.clone(),
        capacity: session.bank.capacity(),
        n_prompts: session.n_prompts,
        n_segmented: session.n_segmented,
        objects: session
            .bank
            .entries()
            .map(|e| MemoryObjectJson {
                object_id: e.object_id,
                visible_frames: e.mask.visible_frames(),
                injected_frames: e.pooled().map(|p| p.keys().copied().collect()),
                masks: e.mask.to_rle_map(),
            })
            .collect(),
    }))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    match state.inner.sessions.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}
