//! Session-oriented HTTP service for steering guided diffusion runs: create
//! a particle ensemble, change concept edits mid-run, advance, inspect.
//!
//! Routes (JSON bodies, errors as `{"error": {"code", "field", "message"}}`):
//!
//! - `POST /v1/sessions` `{id?, config, particles, seed}` → 201 + state
//! - `GET /v1/sessions` → `{sessions: [...]}`
//! - `GET /v1/sessions/{id}` → state; `DELETE` → 204
//! - `PUT /v1/sessions/{id}/edits` `[ConceptEdit, ...]` → accepted guidance
//! - `POST /v1/sessions/{id}/advance` `{"steps": k}` → state

mod api;
mod error;
pub mod session;

pub use api::{router, AppState};
pub use error::ApiError;

/// Serves a fresh, empty session store on `listener` until it fails.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new())).await
}
