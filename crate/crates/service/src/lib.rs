//! HTTP front end for a running experiment: pending queries out, labels in.
//!
//! All state lives in the run's [`Attachment`]; handlers only read its
//! published snapshots or enqueue label submissions for the runner thread.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cmal_core::oracle::{Attachment, AuditRow, QueryId, SubmitError, SubmitOutcome};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const API_PREFIX: &str = "/api/v1";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("address {addr} is already in use; pick another port with --bind")]
    PortBusy { addr: SocketAddr },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid CORS origin {0:?}")]
    Origin(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
pub struct LabelBody {
    pub label: usize,
}

#[derive(Debug, Serialize)]
pub struct LabelReceipt {
    /// `accepted` for a new answer, `duplicate` for an identical re-submission.
    pub status: &'static str,
    pub audit: AuditRow,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn status(State(att): State<Arc<Attachment>>) -> Response {
    Json(att.status()).into_response()
}

async fn metrics(State(att): State<Arc<Attachment>>) -> Response {
    Json(att.metrics()).into_response()
}

async fn queries(State(att): State<Arc<Attachment>>) -> Response {
    Json(att.pending()).into_response()
}

async fn next_query(State(att): State<Arc<Attachment>>) -> Response {
    match att.next_pending() {
        Some(q) => Json(q).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn audit(State(att): State<Arc<Attachment>>) -> Response {
    Json(att.audit()).into_response()
}

async fn submit_label(
    State(att): State<Arc<Attachment>>,
    Path(id): Path<QueryId>,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("expected {{\"label\": <int>}}: {e}")),
    };
    match att.submit(id, body.label) {
        Ok(SubmitOutcome::Accepted(audit)) => Json(LabelReceipt {
            status: "accepted",
            audit,
        })
        .into_response(),
        Ok(SubmitOutcome::Duplicate(audit)) => Json(LabelReceipt {
            status: "duplicate",
            audit,
        })
        .into_response(),
        Err(e @ SubmitError::UnknownQuery(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ SubmitError::Conflict { existing, .. }) => (
            StatusCode::CONFLICT,
            Json(json!({ "error": e.to_string(), "existing_label": existing })),
        )
            .into_response(),
        Err(e @ SubmitError::LabelOutOfRange { .. }) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

/// Routes under `/api/v1`, with CORS for `origin` (any origin when `None`).
pub fn router(attachment: Arc<Attachment>, origin: Option<&str>) -> Result<Router, ServiceError> {
    let allow = match origin {
        None => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| ServiceError::Origin(o.into()))?),
    };
    let cors = CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let api = Router::new()
        .route("/status", get(status))
        .route("/metrics", get(metrics))
        .route("/queries", get(queries))
        .route("/queries/next", get(next_query))
        .route("/queries/{id}/label", post(submit_label))
        .route("/audit", get(audit))
        .with_state(attachment);
    Ok(Router::new().nest(API_PREFIX, api).layer(cors))
}

/// Binds `addr`, reporting an occupied port distinctly.
pub fn bind(addr: SocketAddr) -> Result<std::net::TcpListener, ServiceError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| match source.kind() {
        std::io::ErrorKind::AddrInUse => ServiceError::PortBusy { addr },
        _ => ServiceError::Bind { addr, source },
    })?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// A service running on its own thread and runtime.
#[derive(Debug)]
pub struct RunningService {
    pub addr: SocketAddr,
    thread: JoinHandle<std::io::Result<()>>,
}

impl RunningService {
    /// Blocks until the server stops.
    pub fn join(self) -> std::io::Result<()> {
        self.thread
            .join()
            .unwrap_or_else(|_| Err(std::io::Error::other("service thread panicked")))
    }
}

/// Binds synchronously, then serves on a background thread.
pub fn spawn(attachment: Arc<Attachment>, addr: SocketAddr, origin: Option<&str>) -> Result<RunningService, ServiceError> {
    let app = router(attachment, origin)?;
    let listener = bind(addr)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()?;
    let thread = std::thread::Builder::new()
        .name("annotation-service".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app).await
            })
        })?;
    Ok(RunningService { addr, thread })
}
