//! Standalone HTTP server for the three backend protocols, backed by
//! [`MockBackends`]. Injected failures answer 503.

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use matir_core::backend::{
    BackendError, EmbedTextRequest, EmbedTextResponse, Grounder, ImageQuery, RelevanceScorer,
    TextEmbedder,
};
use matir_core::mock::{MockBackends, MockSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::api::ErrorBody;

fn json<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let bytes = serde_json::to_vec(body).expect("mock responses serialize");
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn failure(e: BackendError) -> Response {
    let status = match &e {
        BackendError::Status(code) => {
            StatusCode::from_u16(*code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
        }
        BackendError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    json(
        status,
        &ErrorBody {
            error: e.to_string(),
        },
    )
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| failure(BackendError::InvalidRequest(e.to_string())))
}

fn respond<T: Serialize>(r: Result<T, BackendError>) -> Response {
    match r {
        Ok(v) => json(StatusCode::OK, &v),
        Err(e) => failure(e),
    }
}

async fn embed_text(State(m): State<MockBackends>, body: Bytes) -> Response {
    let req: EmbedTextRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    respond(
        m.embed_text(&req.texts)
            .await
            .map(|embeddings| EmbedTextResponse { embeddings }),
    )
}

async fn score(State(m): State<MockBackends>, body: Bytes) -> Response {
    match parse::<ImageQuery>(&body) {
        Ok(q) => respond(m.score(&q).await),
        Err(resp) => resp,
    }
}

async fn ground(State(m): State<MockBackends>, body: Bytes) -> Response {
    match parse::<ImageQuery>(&body) {
        Ok(q) => respond(m.ground(&q).await),
        Err(resp) => resp,
    }
}

pub fn mock_router(mocks: MockBackends) -> Router {
    Router::new()
        .route("/", get(|| async { "ok" }))
        .route("/v1/embed_text", post(embed_text))
        .route("/v1/score", post(score))
        .route("/v1/ground", post(ground))
        .with_state(mocks)
}

/// A mock server running on a background task.
pub struct RunningMocks {
    pub addr: SocketAddr,
    pub mocks: MockBackends,
    pub task: JoinHandle<()>,
}

impl RunningMocks {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningMocks {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `spec` in the background.
pub async fn serve_mocks(spec: MockSpec, addr: &str) -> std::io::Result<RunningMocks> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let mocks = MockBackends::new(spec);
    let app = mock_router(mocks.clone());
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "mock server stopped");
        }
    });
    Ok(RunningMocks { addr, mocks, task })
}
