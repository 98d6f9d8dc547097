//! Engine HTTP API: `/v1/search`, `/v1/search_embedding`, `/v1/health`.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use matir_core::{Error, IndexStats, Mode, Pipeline, QueryEmbedding, SearchResponse};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const PING_TIMEOUT: Duration = Duration::from_secs(2);

/// Shared request state. `pipeline` is `None` when no index could be loaded.
pub struct AppState {
    pipeline: Option<Pipeline>,
    index_error: Option<String>,
}

impl AppState {
    pub fn ready(pipeline: Pipeline) -> Self {
        Self {
            pipeline: Some(pipeline),
            index_error: None,
        }
    }

    pub fn without_index(reason: impl Into<String>) -> Self {
        Self {
            pipeline: None,
            index_error: Some(reason.into()),
        }
    }

    pub fn pipeline(&self) -> Option<&Pipeline> {
        self.pipeline.as_ref()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub query_text: String,
    #[serde(default)]
    pub n_k: Option<usize>,
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchEmbeddingRequest {
    pub embedding: Vec<f32>,
    #[serde(default)]
    pub query_text: Option<String>,
    #[serde(default)]
    pub n_k: Option<usize>,
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Ok,
    Degraded,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendReachability {
    pub text_embedder: bool,
    pub scorer: bool,
    pub grounder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: HealthStatus,
    pub index: Option<IndexStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub index_error: Option<String>,
    pub backends: BackendReachability,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Error returned by a handler, rendered as `{"error": ...}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::BackendUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::InvalidInput(_)
            | Error::InvalidQuery(_)
            | Error::DimensionMismatch { .. }
            | Error::MalformedMask(_)
            | Error::Parse { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::warn!(status = %self.status, error = %self.message, "request failed");
        }
        json_response(
            self.status,
            &ErrorBody {
                error: self.message,
            },
        )
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

fn pipeline(state: &AppState) -> Result<&Pipeline, ApiError> {
    state.pipeline.as_ref().ok_or_else(|| ApiError {
        status: StatusCode::SERVICE_UNAVAILABLE,
        message: format!(
            "index not loaded: {}",
            state
                .index_error
                .as_deref()
                .unwrap_or("no index configured")
        ),
    })
}

async fn search(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: SearchRequest = parse(&body)?;
    let p = pipeline(&state)?;
    if req.query_text.trim().is_empty() {
        return Err(ApiError::bad_request("query_text must not be empty"));
    }
    let mode = req.mode.unwrap_or_default();
    let outcome = p.run_text(&req.query_text, mode, req.n_k).await?;
    Ok(json_response(
        StatusCode::OK,
        &outcome.into_response(Some(req.query_text)),
    ))
}

async fn search_embedding(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: SearchEmbeddingRequest = parse(&body)?;
    let p = pipeline(&state)?;
    let dim = p.index().dimension();
    if req.embedding.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: req.embedding.len(),
        }
        .into());
    }
    let q = QueryEmbedding::normalized(&req.embedding)?;
    let mode = req.mode.unwrap_or_default();
    let outcome = p.run(&q, req.query_text.as_deref(), mode, req.n_k).await?;
    let response: SearchResponse = outcome.into_response(req.query_text);
    Ok(json_response(StatusCode::OK, &response))
}

async fn ping<F: std::future::Future<Output = bool>>(f: Option<F>) -> bool {
    match f {
        Some(f) => tokio::time::timeout(PING_TIMEOUT, f).await.unwrap_or(false),
        None => false,
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let Some(p) = state.pipeline.as_ref() else {
        let body = HealthResponse {
            status: HealthStatus::Unavailable,
            index: None,
            index_error: state.index_error.clone(),
            backends: BackendReachability {
                text_embedder: false,
                scorer: false,
                grounder: false,
            },
        };
        return json_response(StatusCode::SERVICE_UNAVAILABLE, &body);
    };
    let b = p.backends();
    let (text_embedder, scorer, grounder) = tokio::join!(
        ping(b.embedder.as_ref().map(|e| e.ping())),
        ping(b.scorer.as_ref().map(|s| s.ping())),
        ping(b.grounder.as_ref().map(|g| g.ping())),
    );
    let status = if text_embedder && scorer && grounder {
        HealthStatus::Ok
    } else {
        HealthStatus::Degraded
    };
    let body = HealthResponse {
        status,
        index: Some(p.index().stats()),
        index_error: None,
        backends: BackendReachability {
            text_embedder,
            scorer,
            grounder,
        },
    };
    json_response(StatusCode::OK, &body)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/search", post(search))
        .route("/v1/search_embedding", post(search_embedding))
        .route("/v1/health", get(health))
        .with_state(state)
}
