//! Model backend contracts and the bounded fan-out used to call them.
//!
//! Three backends sit behind JSON protocols: a text embedder, a relevance
//! scorer and a box grounder. The engine only ever sends an image URI and
//! the object text; backends resolve pixels themselves.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextResponse {
    pub embeddings: Vec<Vec<f32>>,
}

/// Request body shared by `/v1/score` and `/v1/ground`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageQuery {
    pub image_uri: String,
    pub object_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub z_true: f64,
    pub z_false: f64,
}

/// Boxes are absolute-pixel corners `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundResponse {
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[async_trait]
pub trait TextEmbedder: Send + Sync {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;

    /// Whether the backend answers at all.
    async fn ping(&self) -> bool {
        true
    }
}

#[async_trait]
pub trait RelevanceScorer: Send + Sync {
    async fn score(&self, query: &ImageQuery) -> Result<ScoreResponse, BackendError>;

    async fn ping(&self) -> bool {
        true
    }
}

#[async_trait]
pub trait Grounder: Send + Sync {
    async fn ground(&self, query: &ImageQuery) -> Result<GroundResponse, BackendError>;

    async fn ping(&self) -> bool {
        true
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_RETRIES: u32 = 2;

/// Bounded, retrying concurrent caller. Clones share one in-flight limit.
#[derive(Debug, Clone)]
pub struct FanOut {
    limiter: Arc<Semaphore>,
    max_in_flight: usize,
    timeout: Duration,
    retries: u32,
}

impl Default for FanOut {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_IN_FLIGHT, DEFAULT_TIMEOUT, DEFAULT_RETRIES)
    }
}

/// Result of one logical call after retries.
#[derive(Debug)]
pub struct CallOutcome<T> {
    pub result: Result<T, BackendError>,
    pub attempts: u32,
}

impl FanOut {
    pub fn new(max_in_flight: usize, timeout: Duration, retries: u32) -> Self {
        let max_in_flight = max_in_flight.max(1);
        Self {
            limiter: Arc::new(Semaphore::new(max_in_flight)),
            max_in_flight,
            timeout,
            retries,
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn retries(&self) -> u32 {
        self.retries
    }

    /// Runs `call` with the per-call timeout, retrying up to `retries` times.
    /// Each attempt holds one permit of the shared limiter.
    pub async fn call<T, F, Fut>(&self, backend: &str, key: &str, call: F) -> CallOutcome<T>
    where
        F: Fn() -> Fut,
        Fut: Future<Output = Result<T, BackendError>>,
    {
        let max_attempts = self.retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self
                    .limiter
                    .acquire()
                    .await
                    .expect("limiter is never closed");
                match tokio::time::timeout(self.timeout, call()).await {
                    Ok(r) => r,
                    Err(_) => Err(BackendError::Timeout(self.timeout)),
                }
            };
            match result {
                Ok(v) => {
                    return CallOutcome {
                        result: Ok(v),
                        attempts: attempt,
                    }
                }
                Err(e) if attempt < max_attempts => {
                    tracing::warn!(backend, key, attempt, max_attempts, error = %e, "backend call failed, retrying");
                }
                Err(e) => {
                    tracing::warn!(backend, key, attempts = attempt, error = %e, "backend call failed, giving up");
                    return CallOutcome {
                        result: Err(e),
                        attempts: attempt,
                    };
                }
            }
        }
    }
}
