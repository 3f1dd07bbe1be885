//! HTTP API over a kgnav [`Engine`].
//!
//! The engine is synchronous; handlers run it on the blocking pool. A message
//! turn streams its [`StreamEvent`]s as server-sent events named after the
//! event type, each carrying the event's JSON.

pub mod cli;

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use kgnav_core::pipeline::{Engine, EngineError, MessageInput, StreamEvent};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "bad_request".into(), message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal".into(), message: message.into() }
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "unknown_session" | "unknown_edge" | "unknown_recommendation" => StatusCode::NOT_FOUND,
        "session_exists" | "already_explored" => StatusCode::CONFLICT,
        "bad_request" | "invalid_query" | "step_out_of_range" | "session_error" => StatusCode::BAD_REQUEST,
        "store_unavailable" => StatusCode::SERVICE_UNAVAILABLE,
        "missing_fixture" | "timeout" | "llm_error" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        Self { status: status_for(e.code()), code: e.code().into(), message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": {"code": self.code, "message": self.message}}))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}

fn parse_body<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

pub fn valid_session_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/graph", get(get_graph))
        .route("/sessions/{id}/recommendations", get(get_recommendations))
        .route("/sessions/{id}/recommendations/{rid}/dismiss", post(dismiss))
        .route("/sessions/{id}/progress", get(get_progress))
        .route("/edges/{edge_id}/evidence", get(get_evidence))
        .with_state(engine)
}

async fn healthz(State(engine): State<Arc<Engine>>) -> Json<serde_json::Value> {
    let g = engine.graph();
    Json(json!({"status": "ok", "nodes": g.nodes().count(), "edges": g.edges().len()}))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    id: Option<String>,
}

#[derive(Debug, Serialize)]
struct Created {
    id: String,
}

async fn create_session(
    State(engine): State<Arc<Engine>>,
    body: Bytes,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let id = req.id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    if !valid_session_id(&id) {
        return Err(ApiError::bad_request("session id must be 1-64 characters of [A-Za-z0-9_-]"));
    }
    let created = id.clone();
    blocking(move || engine.create_session(&created)).await?;
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn get_session(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
) -> ApiResult<kgnav_core::session::SessionState> {
    blocking(move || engine.state(&id)).await.map(Json)
}

#[allow(clippy::large_enum_variant)]
enum Msg {
    Event(StreamEvent),
    Rejected(EngineError),
}

fn sse_event(msg: Msg) -> Result<Event, Infallible> {
    let ev = match msg {
        Msg::Event(ev) => ev,
        Msg::Rejected(e) => StreamEvent::Error { code: e.code().into(), message: e.to_string() },
    };
    Ok(Event::default().event(ev.name()).json_data(&ev).expect("stream events serialize"))
}

/// Runs the turn on the blocking pool. Errors raised before the first event
/// become plain HTTP errors; everything after travels in the stream.
async fn post_message(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let input: MessageInput = parse_body(&body)?;
    let (tx, mut rx) = mpsc::unbounded_channel();
    tokio::task::spawn_blocking(move || {
        let events = tx.clone();
        let result = engine.handle_message(&id, input, &mut |ev| {
            let _ = events.send(Msg::Event(ev));
        });
        if let Err(e) = result {
            let _ = tx.send(Msg::Rejected(e));
        }
    });
    let first = match rx.recv().await {
        None => return Err(ApiError::internal("turn ended without output")),
        Some(Msg::Rejected(e)) => return Err(e.into()),
        Some(first) => first,
    };
    let rest = stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|m| (m, rx)) });
    Ok(Sse::new(stream::once(async { first }).chain(rest).map(sse_event)).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct StepParam {
    step: Option<usize>,
}

async fn get_graph(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    query: Result<Query<StepParam>, QueryRejection>,
) -> ApiResult<kgnav_core::pipeline::GraphSnapshot> {
    let Query(p) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    blocking(move || engine.graph_view(&id, p.step)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct KParam {
    k: Option<usize>,
}

async fn get_recommendations(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    query: Result<Query<KParam>, QueryRejection>,
) -> ApiResult<serde_json::Value> {
    let Query(p) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let k = p.k.unwrap_or(kgnav_core::pipeline::DEFAULT_RECOMMENDATIONS);
    let items = blocking(move || engine.recommendations(&id, k)).await?;
    Ok(Json(json!({ "items": items })))
}

async fn dismiss(
    State(engine): State<Arc<Engine>>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<serde_json::Value> {
    let (items, progress) = blocking(move || engine.dismiss(&id, &rid)).await?;
    Ok(Json(json!({ "items": items, "progress": progress })))
}

async fn get_progress(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
) -> ApiResult<kgnav_core::pipeline::ProgressReport> {
    blocking(move || engine.progress(&id)).await.map(Json)
}

async fn get_evidence(
    State(engine): State<Arc<Engine>>,
    Path(edge_id): Path<String>,
) -> ApiResult<kgnav_core::pipeline::EvidenceReport> {
    blocking(move || engine.evidence(&edge_id)).await.map(Json)
}
