//! HTTP/JSON transport for the session service.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use evalsample::service::{Rating, Service, SessionConfig};
use evalsample::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let status = match err {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::NotPending(_) | Error::SessionComplete => StatusCode::CONFLICT,
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

fn ok<T: Serialize>(value: evalsample::Result<T>) -> ApiResult<T> {
    value.map(Json).map_err(ApiError::from)
}

async fn healthz(State(service): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "test_sets": service.test_set_names() }))
}

async fn create(State(service): State<Arc<Service>>, bytes: Bytes) -> Result<Response, ApiError> {
    let config: SessionConfig = body(&bytes)?;
    let created = service.create_session(config)?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn next(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<evalsample::service::NextSegment> {
    ok(service.next(&id))
}

async fn submit(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<evalsample::service::SubmitResponse> {
    let rating: Rating = body(&bytes)?;
    ok(service.submit(&id, &rating))
}

async fn report(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<evalsample::service::SessionReport> {
    ok(service.report(&id))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/ratings", post(submit))
        .route("/sessions/{id}/report", get(report))
        .with_state(service)
}

/// Binds, reports the bound address through `on_bound`, and serves until
/// interrupted.
pub fn serve(service: Service, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_bound(listener.local_addr()?);
        axum::serve(listener, router(Arc::new(service)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
