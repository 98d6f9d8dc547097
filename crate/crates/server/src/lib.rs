//! HTTP front end for the matir engine.
//!
//! [`api`] serves search and health over a shared immutable index,
//! [`client`] talks to the embedder, scorer and grounder model servers, and
//! [`mocks`] serves the same three protocols from a seeded [`MockSpec`].
//!
//! [`MockSpec`]: matir_core::mock::MockSpec

pub mod api;
pub mod client;
pub mod config;
pub mod mocks;

use std::net::SocketAddr;
use std::sync::Arc;

use matir_core::{GalleryIndex, Pipeline};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use mocks::{serve_mocks, RunningMocks};

/// Builds the service state. An index that is missing or fails to load
/// leaves the service up but unavailable.
pub fn build_state(config: &ServiceConfig) -> Result<AppState, String> {
    let backends = client::http_backends(config)?;
    let Some(path) = config.index_path.as_ref() else {
        return Ok(AppState::without_index("no index_path configured"));
    };
    let index = match GalleryIndex::load(path) {
        Ok(i) => i,
        Err(e) => {
            let reason = format!("{}: {e}", path.display());
            tracing::error!(%reason, "index not loaded");
            return Ok(AppState::without_index(reason));
        }
    };
    tracing::info!(
        images = index.len(),
        regions = index.total_regions(),
        "index loaded"
    );
    let pipeline = Pipeline::new(Arc::new(index), backends, config.pipeline_config())
        .map_err(|e| e.to_string())?;
    Ok(AppState::ready(pipeline))
}

/// The engine running on a background task.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub task: JoinHandle<()>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Serves `state` on `addr` in the background.
pub async fn spawn(state: AppState, addr: &str) -> std::io::Result<RunningServer> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let app = router(Arc::new(state));
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(RunningServer { addr, task })
}

/// Serves `state` on `addr` until ctrl-c.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
