use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::{serve_query, Artifacts, GroupPolicy, ServeRequest};
use crate::error::Error;

struct AppState {
    artifacts: Artifacts,
    policy: GroupPolicy,
}

fn error_response(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::AdaptorNotFound(_) | Error::UnknownDocument(_) => StatusCode::NOT_FOUND,
        Error::MixedGroups(_) => StatusCode::CONFLICT,
        Error::LengthOverflow { .. } | Error::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Error::EmptyStore => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ServeRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e),
    };
    let result = tokio::task::spawn_blocking(move || {
        let ctx = state.artifacts.context(state.policy);
        serve_query(&req, &ctx)
    })
    .await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(status_for(&e), e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(json!({
        "status": "ok",
        "passages": state.artifacts.store.len(),
        "documents": state.artifacts.store.documents().len(),
        "groups": state.artifacts.adaptors.len(),
    }))
    .into_response()
}

async fn groups(State(state): State<Arc<AppState>>) -> Response {
    let records: Vec<_> = state.artifacts.registry.records().cloned().collect();
    Json(json!({ "groups": records })).into_response()
}

/// `POST /v1/query`, `GET /v1/health`, `GET /v1/groups`.
pub fn router(artifacts: Artifacts, policy: GroupPolicy) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/health", get(health))
        .route("/v1/groups", get(groups))
        .with_state(Arc::new(AppState { artifacts, policy }))
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve_http(addr: SocketAddr, artifacts: Artifacts, policy: GroupPolicy) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(artifacts, policy))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
