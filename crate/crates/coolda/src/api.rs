//! Console HTTP API over a shared [`ActivityServer`].
//!
//! | method | path                                | |
//! |--------|-------------------------------------|-|
//! | GET    | `/instances`                        | summaries |
//! | GET    | `/instances/{id}`                   | snapshot |
//! | POST   | `/instances`                        | create from a definition |
//! | POST   | `/instances/{id}/bindings`          | add a live binding |
//! | DELETE | `/instances/{id}/bindings/{bid}`    | remove a live binding |
//! | GET    | `/tools?url=`                       | describe a tool |
//! | GET    | `/instances/{id}/stream`            | trace entries, server-sent events |
//!
//! Stream events carry the entry's index in the trace as their `id`. A client
//! resumes with `Last-Event-ID` (or `?from=<index>`) and gets every entry
//! from there on, backlog first.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use coolda_core::canonical;
use coolda_core::model::{ActivityDefinition, Binding, TraceEntry, Violation};
use coolda_core::registry::{filter_integration_surface, RegistryError};
use coolda_core::server::{ActivityServer, ServerError};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;

const FEED_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
struct FeedItem {
    instance_id: String,
    index: usize,
    entry: TraceEntry,
}

#[derive(Clone)]
struct App {
    server: Arc<ActivityServer>,
    feed: broadcast::Sender<Arc<FeedItem>>,
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: String,
    pub detail: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            detail: detail.into(),
            violations: Vec::new(),
        }
    }
}

impl From<ServerError> for ApiError {
    fn from(e: ServerError) -> Self {
        let status = match &e {
            ServerError::UnknownInstance(_) | ServerError::UnknownBinding(_) => StatusCode::NOT_FOUND,
            ServerError::AlreadyJoined(_) => StatusCode::CONFLICT,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self {
            status,
            code: e.code().into(),
            detail: e.to_string(),
            violations: e.violations().to_vec(),
        }
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let (status, code) = match &e {
            RegistryError::InvalidUrl(_) => (StatusCode::BAD_REQUEST, "invalid_url"),
            RegistryError::NotAPlugin(_) => (StatusCode::UNPROCESSABLE_ENTITY, "not_a_plugin"),
            RegistryError::DescribeFailed(_) => (StatusCode::UNPROCESSABLE_ENTITY, "describe_failed"),
            RegistryError::UnknownLocalTool(_) => (StatusCode::NOT_FOUND, "unknown_local_tool"),
            RegistryError::HttpStatus(_) => (StatusCode::BAD_GATEWAY, "http_status"),
            RegistryError::EmptyBody => (StatusCode::BAD_GATEWAY, "empty_body"),
            RegistryError::NetworkUnreachable(_) => (StatusCode::BAD_GATEWAY, "network_unreachable"),
            RegistryError::DuplicateToolId(_) => (StatusCode::CONFLICT, "duplicate_tool_id"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

/// Runs blocking core work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

pub fn console_router(server: Arc<ActivityServer>) -> Router {
    let (feed, _) = broadcast::channel(FEED_CAPACITY);
    let tx = feed.clone();
    server.observe(Arc::new(move |instance_id: &str, index: usize, entry: &TraceEntry| {
        let _ = tx.send(Arc::new(FeedItem {
            instance_id: instance_id.into(),
            index,
            entry: entry.clone(),
        }));
    }));
    Router::new()
        .route("/instances", get(list).post(create))
        .route("/instances/{id}", get(snapshot))
        .route("/instances/{id}/bindings", axum::routing::post(add_binding))
        .route("/instances/{id}/bindings/{bid}", delete(remove_binding))
        .route("/instances/{id}/stream", get(stream_trace))
        .route("/tools", get(describe))
        .with_state(App { server, feed })
}

async fn list(State(app): State<App>) -> impl IntoResponse {
    Json(app.server.list())
}

async fn snapshot(State(app): State<App>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(app.server.snapshot(&id)?))
}

async fn create(State(app): State<App>, Json(def): Json<ActivityDefinition>) -> Result<impl IntoResponse, ApiError> {
    let id = blocking(move || Ok(app.server.create_activity(def)?)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "instance_id": id }))))
}

async fn add_binding(
    State(app): State<App>,
    Path(id): Path<String>,
    Json(binding): Json<Binding>,
) -> Result<impl IntoResponse, ApiError> {
    let bid = app.server.add_live_binding(&id, binding)?;
    Ok((StatusCode::CREATED, Json(json!({ "binding_id": bid }))))
}

async fn remove_binding(State(app): State<App>, Path((id, bid)): Path<(String, String)>) -> Result<StatusCode, ApiError> {
    app.server.remove_live_binding(&id, &bid)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct ToolQuery {
    url: String,
}

async fn describe(State(app): State<App>, Query(q): Query<ToolQuery>) -> Result<impl IntoResponse, ApiError> {
    let registry = app.server.registry().clone();
    let tool = blocking(move || Ok(registry.resolve(&q.url)?)).await?;
    let (_, rejected) = filter_integration_surface(&tool.raw);
    Ok(Json(json!({
        "descriptor": tool.descriptor,
        "rejected": rejected,
        "source_url": tool.artifact.source_url,
    })))
}

#[derive(Deserialize)]
struct StreamQuery {
    from: Option<usize>,
}

fn sse_event(index: usize, entry: &TraceEntry) -> Result<Event, Infallible> {
    let data = canonical::to_canonical_string(entry).unwrap_or_default();
    Ok(Event::default().id(index.to_string()).event(entry.kind.name()).data(data))
}

async fn stream_trace(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
        .map(|last| last + 1);
    let from = q.from.or(resume).unwrap_or(0);
    // Subscribe before reading the backlog so nothing falls in between;
    // overlap is removed by index.
    let rx = app.feed.subscribe();
    let backlog = app.server.trace_since(&id, from)?;
    let next = from + backlog.len();
    let head = stream::iter(
        backlog
            .into_iter()
            .enumerate()
            .map(move |(i, e)| sse_event(from + i, &e))
            .collect::<Vec<_>>(),
    );
    let live = BroadcastStream::new(rx).filter_map(move |item| {
        let out = match item {
            Ok(f) if f.instance_id == id && f.index >= next => Some(sse_event(f.index, &f.entry)),
            _ => None,
        };
        futures::future::ready(out)
    });
    Ok(Sse::new(head.chain(live)).keep_alive(KeepAlive::default()))
}
