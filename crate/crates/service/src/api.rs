//! HTTP routes. Requests to one session are serialized by its mutex; the
//! session map lock is never held across engine work.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{StatusCode, Uri};
use axum::response::IntoResponse;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::session::{parse_body, AdvanceRequest, CreateRequest, Session};

type Shared = Arc<Mutex<Session>>;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Shared>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("id", format!("no session `{id}`")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/sessions", post(create).get(list))
        .route("/v1/sessions/{id}", get(state_of).delete(delete))
        .route("/v1/sessions/{id}/edits", put(edits))
        .route("/v1/sessions/{id}/advance", post(advance))
        .fallback(not_found)
        .with_state(state)
}

/// Runs `f` on the session off the async executor.
async fn with_session<T, F>(session: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&mut session.lock()))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let request: CreateRequest = parse_body(&body, "")?;
    let id = match &request.id {
        Some(id) if id.is_empty() => return Err(ApiError::bad_request("id", "must not be empty")),
        Some(id) => id.clone(),
        None => uuid::Uuid::new_v4().to_string(),
    };
    if app.sessions.read().contains_key(&id) {
        return Err(ApiError::conflict(
            "id",
            format!("session `{id}` already exists"),
        ));
    }
    let (session, snapshot) = tokio::task::spawn_blocking(move || {
        let session = Session::create(id, request)?;
        let snapshot = session.snapshot();
        Ok::<_, ApiError>((session, snapshot))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let mut sessions = app.sessions.write();
    if sessions.contains_key(session.id()) {
        return Err(ApiError::conflict(
            "id",
            format!("session `{}` already exists", session.id()),
        ));
    }
    sessions.insert(session.id().to_string(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(snapshot)))
}

async fn list(State(app): State<AppState>) -> Json<Value> {
    let sessions: Vec<Shared> = app.sessions.read().values().cloned().collect();
    let mut entries: Vec<Value> = sessions.iter().map(|s| s.lock().summary()).collect();
    entries.sort_by(|a, b| a["id"].as_str().cmp(&b["id"].as_str()));
    Json(json!({ "sessions": entries }))
}

async fn state_of(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let session = app.get(&id)?;
    with_session(session, |s| Ok(s.snapshot())).await.map(Json)
}

async fn delete(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    app.sessions
        .write()
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found("id", format!("no session `{id}`")))
}

async fn edits(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let session = app.get(&id)?;
    with_session(session, move |s| {
        let t = s.t();
        let accepted = serde_json::to_value(s.update_edits(&body)?).expect("config serializes");
        Ok(json!({ "t": t, "guidance": accepted }))
    })
    .await
    .map(Json)
}

async fn advance(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let session = app.get(&id)?;
    let request: AdvanceRequest = parse_body(&body, "")?;
    with_session(session, move |s| {
        s.advance(request.steps)?;
        Ok(s.snapshot())
    })
    .await
    .map(Json)
}

async fn not_found(uri: Uri) -> ApiError {
    ApiError::not_found("path", format!("no route for `{}`", uri.path()))
}
