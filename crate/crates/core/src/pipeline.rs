//! End-to-end query flow: embed, stage-1 search, rerank, ground.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{FanOut, Grounder, RelevanceScorer, TextEmbedder};
use crate::error::{Error, Result};
use crate::grounding::{fallback_grounding, ground, GroundedResult, GroundingSource};
use crate::index::GalleryIndex;
use crate::metrics::RankedItem;
use crate::model::RegionMask;
use crate::rerank::{degraded_rerank, rerank, RerankedResult};
use crate::search::{ensemble_query, search, QueryEmbedding, RankedResult, SearchParams};

/// How far a query runs through the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    Stage1,
    RerankOnly,
}

/// What to do when every call to a backend fails.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutagePolicy {
    /// Answer anyway: scorer outage gives relevance 0 for all, grounder
    /// outage gives stage-1 masks.
    #[default]
    Degrade,
    /// Report the backend as unavailable.
    Fail,
}

#[derive(Default, Clone)]
pub struct Backends {
    pub embedder: Option<Arc<dyn TextEmbedder>>,
    pub scorer: Option<Arc<dyn RelevanceScorer>>,
    pub grounder: Option<Arc<dyn Grounder>>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub params: SearchParams,
    pub fan_out: FanOut,
    pub outage: OutagePolicy,
    /// Templates with a `{}` placeholder expanded into per-prompt texts
    /// before embedding. Empty means the raw query text is sent as-is.
    pub prompt_templates: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            params: SearchParams::default(),
            fan_out: FanOut::default(),
            outage: OutagePolicy::Degrade,
            prompt_templates: Vec::new(),
        }
    }
}

/// One result row as returned by the service and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub image_id: String,
    /// Reranker relevance; absent in stage-1 mode.
    pub relevance: Option<f64>,
    pub stage1_score: f64,
    pub mask_id: Option<u64>,
    pub mask: Option<RegionMask>,
    /// Box IoU of the grounder match; absent when grounding did not run.
    pub matched_iou: Option<f64>,
    pub source: GroundingSource,
    pub scorer_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub query_text: Option<String>,
    pub mode: Mode,
    pub results: Vec<SearchHit>,
}

/// Everything a query produced, including the stage-1 candidates used to
/// pad evaluation rankings.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub mode: Mode,
    pub candidates: Vec<RankedResult>,
    pub hits: Vec<SearchHit>,
}

impl SearchOutcome {
    pub fn scorer_failures(&self) -> usize {
        self.hits.iter().filter(|h| h.scorer_failed).count()
    }

    pub fn grounding_fallbacks(&self) -> usize {
        if self.mode != Mode::Full {
            return 0;
        }
        self.hits
            .iter()
            .filter(|h| h.source == GroundingSource::Stage1Fallback)
            .count()
    }

    /// Final ranking for scoring: the pipeline hits, then remaining stage-1
    /// candidates in stage-1 order (with their stage-1 masks), up to `depth`.
    pub fn evaluation_ranking(&self, index: &GalleryIndex, depth: usize) -> Vec<RankedItem> {
        let mut items: Vec<RankedItem> = self
            .hits
            .iter()
            .take(depth)
            .map(|h| RankedItem {
                image_id: h.image_id.clone(),
                mask: h.mask.clone(),
                score: h.relevance.unwrap_or(h.stage1_score),
            })
            .collect();
        if items.len() < depth {
            let taken: std::collections::HashSet<&str> =
                self.hits.iter().map(|h| h.image_id.as_str()).collect();
            for c in &self.candidates {
                if items.len() >= depth {
                    break;
                }
                if taken.contains(c.image_id.as_str()) {
                    continue;
                }
                items.push(RankedItem {
                    image_id: c.image_id.clone(),
                    mask: stage1_mask(index, c),
                    score: c.stage1_score,
                });
            }
        }
        items
    }

    pub fn into_response(self, query_text: Option<String>) -> SearchResponse {
        SearchResponse {
            query_text,
            mode: self.mode,
            results: self.hits,
        }
    }
}

fn stage1_mask(index: &GalleryIndex, c: &RankedResult) -> Option<RegionMask> {
    let id = c.best_region?;
    index.image(&c.image_id)?.region(id).map(|r| r.mask.clone())
}

fn stage1_hit(index: &GalleryIndex, c: &RankedResult) -> SearchHit {
    SearchHit {
        image_id: c.image_id.clone(),
        relevance: None,
        stage1_score: c.stage1_score,
        mask_id: c.best_region,
        mask: stage1_mask(index, c),
        matched_iou: None,
        source: GroundingSource::Stage1Fallback,
        scorer_failed: false,
    }
}

fn reranked_hit(index: &GalleryIndex, r: &RerankedResult) -> SearchHit {
    let c = RankedResult {
        image_id: r.image_id.clone(),
        stage1_score: r.stage1_score,
        best_region: r.best_region,
    };
    SearchHit {
        relevance: Some(r.relevance),
        scorer_failed: r.scorer_failed,
        ..stage1_hit(index, &c)
    }
}

fn grounded_hit(g: GroundedResult) -> SearchHit {
    SearchHit {
        image_id: g.image_id,
        relevance: Some(g.relevance),
        stage1_score: g.stage1_score,
        mask_id: g.mask_id,
        mask: g.mask,
        matched_iou: Some(g.matched_iou),
        source: g.source,
        scorer_failed: g.scorer_failed,
    }
}

/// Query engine over a shared immutable index.
#[derive(Clone)]
pub struct Pipeline {
    index: Arc<GalleryIndex>,
    backends: Backends,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        index: Arc<GalleryIndex>,
        backends: Backends,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.params.validate()?;
        Ok(Self {
            index,
            backends,
            config,
        })
    }

    pub fn index(&self) -> &Arc<GalleryIndex> {
        &self.index
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Per-prompt texts sent to the embedder for `query_text`.
    pub fn prompt_texts(&self, query_text: &str) -> Vec<String> {
        if self.config.prompt_templates.is_empty() {
            return vec![query_text.to_owned()];
        }
        self.config
            .prompt_templates
            .iter()
            .map(|t| t.replace("{}", query_text))
            .collect()
    }

    /// Embeds the query text and ensembles the per-prompt vectors.
    pub async fn embed_query(&self, query_text: &str) -> Result<QueryEmbedding> {
        let embedder = self
            .backends
            .embedder
            .as_ref()
            .ok_or_else(|| Error::BackendUnavailable("text embedder not configured".into()))?;
        let texts = self.prompt_texts(query_text);
        let outcome = self
            .config
            .fan_out
            .call("embedder", query_text, || embedder.embed_text(&texts))
            .await;
        let vectors = outcome
            .result
            .map_err(|e| Error::BackendUnavailable(format!("text embedder: {e}")))?;
        if vectors.len() != texts.len() {
            return Err(Error::BackendUnavailable(format!(
                "text embedder returned {} embeddings for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        let dim = self.index.dimension();
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        ensemble_query(&vectors)
    }

    /// Runs a query embedding through the stages selected by `mode`.
    /// `n_k` overrides the configured keep count for this call.
    pub async fn run(
        &self,
        query: &QueryEmbedding,
        query_text: Option<&str>,
        mode: Mode,
        n_k: Option<usize>,
    ) -> Result<SearchOutcome> {
        let params = SearchParams {
            n_c: self.config.params.n_c,
            n_k: n_k.unwrap_or(self.config.params.n_k),
        };
        params.validate()?;
        let index = &*self.index;
        let candidates = search(query, index, &params)?;

        if mode == Mode::Stage1 {
            let hits = candidates
                .iter()
                .take(params.n_k)
                .map(|c| stage1_hit(index, c))
                .collect();
            return Ok(SearchOutcome {
                mode,
                candidates,
                hits,
            });
        }

        let text = query_text
            .ok_or_else(|| Error::InvalidInput("query text is required for reranking".into()))?;
        let scorer =
            self.backends.scorer.as_ref().ok_or_else(|| {
                Error::BackendUnavailable("relevance scorer not configured".into())
            })?;
        let grounder = if mode == Mode::Full {
            Some(
                self.backends
                    .grounder
                    .as_ref()
                    .ok_or_else(|| Error::BackendUnavailable("grounder not configured".into()))?,
            )
        } else {
            None
        };

        let fan_out = &self.config.fan_out;
        let reranked = match rerank(
            &candidates,
            scorer.as_ref(),
            text,
            index,
            params.n_k,
            fan_out,
        )
        .await
        {
            Ok(r) => r,
            Err(Error::BackendUnavailable(msg)) if self.config.outage == OutagePolicy::Degrade => {
                tracing::warn!(%msg, "scorer unavailable, keeping stage-1 order");
                degraded_rerank(&candidates, params.n_k)
            }
            Err(e) => return Err(e),
        };

        let Some(grounder) = grounder else {
            let hits = reranked.iter().map(|r| reranked_hit(index, r)).collect();
            return Ok(SearchOutcome {
                mode,
                candidates,
                hits,
            });
        };

        let grounded = match ground(text, &reranked, grounder.as_ref(), index, fan_out).await {
            Ok(g) => g,
            Err(Error::BackendUnavailable(msg)) if self.config.outage == OutagePolicy::Degrade => {
                tracing::warn!(%msg, "grounder unavailable, using stage-1 masks");
                fallback_grounding(&reranked, index)
            }
            Err(e) => return Err(e),
        };
        let hits = grounded.into_iter().map(grounded_hit).collect();
        Ok(SearchOutcome {
            mode,
            candidates,
            hits,
        })
    }

    /// Embeds `query_text` and runs it.
    pub async fn run_text(
        &self,
        query_text: &str,
        mode: Mode,
        n_k: Option<usize>,
    ) -> Result<SearchOutcome> {
        let q = self.embed_query(query_text).await?;
        self.run(&q, Some(query_text), mode, n_k).await
    }
}
