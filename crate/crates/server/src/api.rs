use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use workbench_core::classifier::TrainingSummary;
use workbench_core::dataset::UploadReport;
use workbench_core::mllm::{AuditLog, HealthStatus};
use workbench_core::prompts::{catalog, TemplateInfo};
use workbench_core::session::SessionPhase;
use workbench_core::{
    AgentContext, AgentId, Category, EventFrame, InferenceResult, Message, Session,
};

use crate::error::ApiError;
use crate::state::AppState;

type AppResult<T> = Result<T, ApiError>;

pub const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/chat", post(chat))
        .route("/sessions/{id}/categories", post(add_category))
        .route(
            "/sessions/{id}/categories/{name}",
            put(rename_category).delete(delete_category),
        )
        .route("/sessions/{id}/categories/{name}/images", post(upload_images))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/infer", post(infer))
        .route("/sessions/{id}/ask/category/{name}", post(ask_category))
        .route("/sessions/{id}/ask/inference/{inference_id}", post(ask_inference))
        .route("/sessions/{id}/active-agent", put(set_active_agent))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/montages/{category}", get(montage))
        .route("/meta/prompts", get(prompts))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}

async fn log_requests(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let session = path
        .strip_prefix("/sessions/")
        .and_then(|rest| rest.split('/').next())
        .unwrap_or("-")
        .to_string();
    let start = Instant::now();
    let response = next.run(req).await;
    tracing::info!(
        session = %session,
        method = %method,
        endpoint = %path,
        status = response.status().as_u16(),
        latency_ms = start.elapsed().as_millis() as u64,
        "request"
    );
    response
}

/// JSON body whose rejection is reported as `{code, message}`.
pub struct JsonBody<T>(pub T);

impl<S, T> FromRequest<S> for JsonBody<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(e) => Err(ApiError::bad_request(e.body_text())),
        }
    }
}

fn find(state: &AppState, id: &str) -> AppResult<Arc<Session>> {
    state.session(id).ok_or_else(|| ApiError::unknown_session(id))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryBody {
    pub session_id: String,
    pub phase: SessionPhase,
    pub active_enabled: bool,
    pub messages: Vec<Message>,
}

fn history_of(session: &Session) -> HistoryBody {
    HistoryBody {
        session_id: session.id().to_string(),
        phase: session.phase(),
        active_enabled: session.toggle().active_enabled,
        messages: session.history(),
    }
}

async fn create_session(State(state): State<Arc<AppState>>) -> AppResult<(StatusCode, Json<HistoryBody>)> {
    let session = state.create_session()?;
    tracing::info!(session = session.id(), "session created");
    Ok((StatusCode::CREATED, Json(history_of(&session))))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(state.session_ids())
}

async fn history(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<HistoryBody>> {
    let session = find(&state, &id)?;
    Ok(Json(history_of(&session)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatBody {
    pub text: String,
}

async fn chat(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<ChatBody>,
) -> AppResult<Json<Message>> {
    let session = find(&state, &id)?;
    Ok(Json(session.handle_chat(&body.text).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NameBody {
    pub name: String,
}

async fn add_category(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<NameBody>,
) -> AppResult<(StatusCode, Json<Category>)> {
    let session = find(&state, &id)?;
    Ok((StatusCode::CREATED, Json(session.add_category(&body.name)?)))
}

async fn rename_category(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
    JsonBody(body): JsonBody<NameBody>,
) -> AppResult<Json<Category>> {
    let session = find(&state, &id)?;
    Ok(Json(session.rename_category(&name, &body.name)?))
}

async fn delete_category(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
) -> AppResult<StatusCode> {
    find(&state, &id)?.remove_category(&name)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn read_files(multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>) -> AppResult<Vec<Vec<u8>>> {
    let mut multipart = multipart.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut files = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?
    {
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        files.push(bytes.to_vec());
    }
    if files.is_empty() {
        return Err(ApiError::bad_request("no files in the multipart body"));
    }
    Ok(files)
}

async fn upload_images(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> AppResult<Json<UploadReport>> {
    let session = find(&state, &id)?;
    let files = read_files(multipart).await?;
    Ok(Json(session.upload_images(&name, &files)?))
}

async fn train(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<TrainingSummary>> {
    let session = find(&state, &id)?;
    let summary = tokio::task::spawn_blocking(move || session.train())
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(summary))
}

async fn infer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> AppResult<Json<InferenceResult>> {
    let session = find(&state, &id)?;
    let mut files = read_files(multipart).await?;
    if files.len() != 1 {
        return Err(ApiError::bad_request("expected exactly one test image"));
    }
    let image = files.remove(0);
    let result = tokio::task::spawn_blocking(move || session.infer(&image))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(result))
}

async fn ask_category(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
) -> AppResult<Json<Message>> {
    let session = find(&state, &id)?;
    Ok(Json(session.handle_ask_category(&name).await?))
}

async fn ask_inference(
    State(state): State<Arc<AppState>>,
    Path((id, inference_id)): Path<(String, String)>,
) -> AppResult<Json<Message>> {
    let session = find(&state, &id)?;
    Ok(Json(session.handle_ask_inference(&inference_id).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ToggleBody {
    pub enabled: bool,
}

async fn set_active_agent(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<ToggleBody>,
) -> AppResult<Json<ToggleBody>> {
    let session = find(&state, &id)?;
    session.set_active_toggle(body.enabled)?;
    Ok(Json(ToggleBody {
        enabled: session.toggle().active_enabled,
    }))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    pub after: Option<u64>,
}

fn to_event(frame: &EventFrame) -> Event {
    Event::default()
        .id(frame.seq.to_string())
        .event(frame.kind.as_str())
        .json_data(frame)
        .expect("frames serialize")
}

struct Feed {
    session: Arc<Session>,
    rx: tokio::sync::broadcast::Receiver<EventFrame>,
    queue: VecDeque<EventFrame>,
    last: u64,
}

/// Frames after the resume point, then live frames, each exactly once and
/// in sequence order. `Last-Event-ID` wins over `?after=`.
async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> AppResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = find(&state, &id)?;
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(query.after)
        .unwrap_or(0);
    let (backlog, rx) = session.subscribe(after);
    let feed = Feed {
        session,
        rx,
        queue: backlog.into(),
        last: after,
    };
    let stream = futures::stream::unfold(feed, |mut feed| async move {
        loop {
            if let Some(frame) = feed.queue.pop_front() {
                if frame.seq <= feed.last {
                    continue;
                }
                feed.last = frame.seq;
                return Some((Ok(to_event(&frame)), feed));
            }
            match feed.rx.recv().await {
                Ok(frame) => feed.queue.push_back(frame),
                Err(RecvError::Lagged(_)) => {
                    let last = feed.last;
                    let missed = feed.session.frames().into_iter().filter(|f| f.seq > last);
                    feed.queue.extend(missed);
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn montage(
    State(state): State<Arc<AppState>>,
    Path((id, category)): Path<(String, String)>,
) -> AppResult<Response> {
    let session = find(&state, &id)?;
    let m = session.montage(&category)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-montage-seed"), m.seed.to_string()),
            (header::ETAG, format!("\"{}\"", m.digest)),
        ],
        m.png.to_vec(),
    )
        .into_response())
}

async fn prompts() -> Json<Vec<TemplateInfo>> {
    Json(catalog())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthStatus> {
    let probe = AgentContext::new(
        AgentId::Passive,
        state.config().backend.clone(),
        AuditLog::in_memory(),
    );
    Json(probe.healthcheck().await)
}
