//! HTTP clients for the embedder, scorer and grounder protocols.

use async_trait::async_trait;
use matir_core::backend::{
    BackendError, EmbedTextRequest, EmbedTextResponse, GroundResponse, Grounder, ImageQuery,
    RelevanceScorer, ScoreResponse, TextEmbedder,
};
use matir_core::Backends;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::sync::Arc;

use crate::config::{check_url, ServiceConfig};

pub const EMBED_TEXT_PATH: &str = "v1/embed_text";
pub const SCORE_PATH: &str = "v1/score";
pub const GROUND_PATH: &str = "v1/ground";

/// One backend base URL. Timeouts and retries are applied by the caller.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    base: reqwest::Url,
}

impl HttpBackend {
    pub fn new(base: &str) -> Result<Self, String> {
        let mut base = check_url(base)?;
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        Ok(Self {
            client: reqwest::Client::new(),
            base,
        })
    }

    pub fn base(&self) -> &reqwest::Url {
        &self.base
    }

    async fn post<Req: Serialize + Sync, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let url = self
            .base
            .join(path)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let resp = self
            .client
            .post(url)
            .json(body)
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Status(status.as_u16()));
        }
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(e.to_string()))
    }

    /// Any HTTP response from the base URL counts as reachable.
    async fn reachable(&self) -> bool {
        self.client.get(self.base.clone()).send().await.is_ok()
    }
}

#[async_trait]
impl TextEmbedder for HttpBackend {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("empty text list".into()));
        }
        let resp: EmbedTextResponse = self
            .post(
                EMBED_TEXT_PATH,
                &EmbedTextRequest {
                    texts: texts.to_vec(),
                },
            )
            .await?;
        if resp.embeddings.len() != texts.len() {
            return Err(BackendError::Malformed(format!(
                "{} embeddings for {} texts",
                resp.embeddings.len(),
                texts.len()
            )));
        }
        Ok(resp.embeddings)
    }

    async fn ping(&self) -> bool {
        self.reachable().await
    }
}

#[async_trait]
impl RelevanceScorer for HttpBackend {
    async fn score(&self, query: &ImageQuery) -> Result<ScoreResponse, BackendError> {
        self.post(SCORE_PATH, query).await
    }

    async fn ping(&self) -> bool {
        self.reachable().await
    }
}

#[async_trait]
impl Grounder for HttpBackend {
    async fn ground(&self, query: &ImageQuery) -> Result<GroundResponse, BackendError> {
        self.post(GROUND_PATH, query).await
    }

    async fn ping(&self) -> bool {
        self.reachable().await
    }
}

/// HTTP backends for every URL present in `config`.
pub fn http_backends(config: &ServiceConfig) -> Result<Backends, String> {
    let make = |url: &Option<String>| {
        url.as_deref()
            .map(HttpBackend::new)
            .transpose()
            .map(|b| b.map(Arc::new))
    };
    Ok(Backends {
        embedder: make(&config.text_embedder_url)?.map(|b| b as Arc<dyn TextEmbedder>),
        scorer: make(&config.scorer_url)?.map(|b| b as Arc<dyn RelevanceScorer>),
        grounder: make(&config.grounder_url)?.map(|b| b as Arc<dyn Grounder>),
    })
}
