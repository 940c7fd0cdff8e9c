//! JSON-over-HTTP routes.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | [`SessionConfig`] | 201 [`SessionSummary`] |
//! | GET | `/sessions/{id}` | | [`SessionSummary`] |
//! | GET | `/sessions/{id}/query` | | [`QueryView`] |
//! | POST | `/sessions/{id}/ranking` | [`RankingRequest`] | [`RankingAck`] |
//! | GET | `/sessions/{id}/best` | | [`BestView`] |
//! | PUT | `/sessions/{id}/favorite` | [`FavoriteRequest`] | [`FavoriteAck`] |
//! | GET | `/health` | | [`Health`] |
//!
//! Errors are `{"code": ..., "message": ...}` with a stable upper-case code.
//! Session work runs on the blocking pool so query generation never stalls
//! the runtime; calls on one session are serialized by its lock.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::{ErrorCode, Result, ServiceError};
use crate::manager::{SessionHandle, SessionManager};
use crate::session::{BestView, QueryView, RankingAck, Session, SessionConfig, SessionSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingRequest {
    /// Best-first indices into the pending query's items.
    pub order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FavoriteRequest {
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FavoriteAck {
    pub favorite: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/query", get(query))
        .route("/sessions/{id}/ranking", post(ranking))
        .route("/sessions/{id}/best", get(best))
        .route("/sessions/{id}/favorite", put(favorite))
        .with_state(manager)
}

fn body<T>(req: std::result::Result<Json<T>, JsonRejection>, code: ErrorCode) -> Result<T> {
    req.map(|Json(v)| v).map_err(|e| ServiceError::new(code, e.body_text()))
}

/// Runs `f` on the session under its lock, off the async runtime.
async fn with_session<T, F>(manager: Arc<SessionManager>, id: String, f: F) -> Result<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> Result<T> + Send + 'static,
{
    let handle: SessionHandle = manager.get(&id)?;
    tokio::task::spawn_blocking(move || {
        let mut s = handle.lock().map_err(|_| ServiceError::internal(format!("session {id} is poisoned")))?;
        f(&mut s)
    })
    .await
    .map_err(|e| ServiceError::internal(e.to_string()))?
}

async fn health(State(m): State<Arc<SessionManager>>) -> Json<Health> {
    Json(Health { status: "ok".into(), sessions: m.len() })
}

async fn create_session(
    State(m): State<Arc<SessionManager>>,
    req: std::result::Result<Json<SessionConfig>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionSummary>)> {
    let config = body(req, ErrorCode::InvalidConfig)?;
    let summary = tokio::task::spawn_blocking(move || {
        let (_, handle) = m.create(config)?;
        let s = handle.lock().map_err(|_| ServiceError::internal("new session is poisoned"))?;
        Ok::<_, ServiceError>(s.summary())
    })
    .await
    .map_err(|e| ServiceError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn summary(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> Result<Json<SessionSummary>> {
    with_session(m, id, |s| Ok(s.summary())).await.map(Json)
}

async fn query(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> Result<Json<QueryView>> {
    with_session(m, id, |s| s.current_query()).await.map(Json)
}

async fn ranking(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    req: std::result::Result<Json<RankingRequest>, JsonRejection>,
) -> Result<Json<RankingAck>> {
    // Look the session up first so an unknown id wins over a bad body.
    m.get(&id)?;
    let req = body(req, ErrorCode::InvalidRanking)?;
    with_session(m, id, move |s| s.submit_ranking(req.order, req.query_id)).await.map(Json)
}

async fn best(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> Result<Json<BestView>> {
    with_session(m, id, |s| Ok(s.predicted_best())).await.map(Json)
}

async fn favorite(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    req: std::result::Result<Json<FavoriteRequest>, JsonRejection>,
) -> Result<Json<FavoriteAck>> {
    m.get(&id)?;
    let req = body(req, ErrorCode::ItemNotDisplayed)?;
    with_session(m, id, move |s| {
        s.set_favorite(req.item_id.clone())?;
        Ok(FavoriteAck { favorite: req.item_id })
    })
    .await
    .map(Json)
}
