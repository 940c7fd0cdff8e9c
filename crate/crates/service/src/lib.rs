//! HTTP session service for interactive preference learning.
//!
//! A session shows a small set of items, takes back a best-first ranking,
//! updates its belief over the user's reward weights and its query generator,
//! and repeats. Every session is an append-only JSON-lines event log; the
//! in-memory state is rebuilt from that log on restart.

mod error;
pub mod events;
pub mod http;
pub mod manager;
pub mod session;

pub use error::{ErrorBody, ErrorCode, Result, ServiceError};
pub use http::{router, FavoriteAck, FavoriteRequest, Health, RankingRequest};
pub use manager::{DefaultPool, ManagerConfig, SessionHandle, SessionManager};
pub use session::{BestView, ItemView, PoolSource, QueryView, RankingAck, Session, SessionConfig, SessionSummary};

/// Serves `manager` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    manager: std::sync::Arc<SessionManager>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(manager)).with_graceful_shutdown(shutdown).await
}
