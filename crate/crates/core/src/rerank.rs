//! Relevance reranking of stage-1 candidates.
//!
//! Each candidate gets one scorer call; the two token logits become a
//! relevance in (0, 1) and candidates are re-sorted by it alone.

use std::cmp::Ordering;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, FanOut, ImageQuery, RelevanceScorer};
use crate::error::{Error, Result};
use crate::index::GalleryIndex;
use crate::search::RankedResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitPair {
    pub z_true: f64,
    pub z_false: f64,
}

impl LogitPair {
    pub fn new(z_true: f64, z_false: f64) -> Self {
        Self { z_true, z_false }
    }
}

/// `exp(z_true) / (exp(z_true) + exp(z_false))`, evaluated as the logistic
/// of the logit difference so large magnitudes cannot overflow.
pub fn relevance_from_logits(p: LogitPair) -> Result<f64> {
    if !p.z_true.is_finite() || !p.z_false.is_finite() {
        return Err(Error::InvalidLogit(format!(
            "({}, {})",
            p.z_true, p.z_false
        )));
    }
    let x = p.z_true - p.z_false;
    Ok(if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedResult {
    pub image_id: String,
    pub relevance: f64,
    pub stage1_score: f64,
    pub best_region: Option<u64>,
    /// Set when the scorer could not be reached for this image; relevance is 0.
    pub scorer_failed: bool,
}

/// Final rerank order: relevance desc, stage-1 score desc, image id asc.
pub fn rerank_order(a: &RerankedResult, b: &RerankedResult) -> Ordering {
    b.relevance
        .total_cmp(&a.relevance)
        .then_with(|| b.stage1_score.total_cmp(&a.stage1_score))
        .then_with(|| a.image_id.cmp(&b.image_id))
}

fn sort_and_cut(mut results: Vec<RerankedResult>, n_k: usize) -> Vec<RerankedResult> {
    results.sort_by(rerank_order);
    results.truncate(n_k);
    results
}

/// Result set used when the scorer is down: every candidate flagged with
/// relevance 0, which leaves them in stage-1 order.
pub fn degraded_rerank(candidates: &[RankedResult], n_k: usize) -> Vec<RerankedResult> {
    let results = candidates
        .iter()
        .map(|c| RerankedResult {
            image_id: c.image_id.clone(),
            relevance: 0.0,
            stage1_score: c.stage1_score,
            best_region: c.best_region,
            scorer_failed: true,
        })
        .collect();
    sort_and_cut(results, n_k)
}

/// Scores every candidate concurrently and keeps the top `n_k`.
///
/// A candidate whose calls all fail is kept with relevance 0 and
/// `scorer_failed` set. If every call fails the scorer is treated as down
/// and [`Error::BackendUnavailable`] is returned.
pub async fn rerank(
    candidates: &[RankedResult],
    scorer: &dyn RelevanceScorer,
    query_text: &str,
    index: &GalleryIndex,
    n_k: usize,
    fan_out: &FanOut,
) -> Result<Vec<RerankedResult>> {
    let calls = candidates.iter().map(|c| async move {
        let image_uri = index
            .image(&c.image_id)
            .map(|e| e.backend_uri().to_owned())
            .unwrap_or_else(|| c.image_id.clone());
        let query = ImageQuery {
            image_uri,
            object_text: query_text.to_owned(),
        };
        let outcome = fan_out
            .call("scorer", &c.image_id, || async {
                let resp = scorer.score(&query).await?;
                relevance_from_logits(LogitPair::new(resp.z_true, resp.z_false))
                    .map_err(|e| BackendError::Malformed(e.to_string()))
            })
            .await;
        outcome.result
    });
    let scored = join_all(calls).await;

    if !candidates.is_empty() && scored.iter().all(|r| r.is_err()) {
        let last = scored.into_iter().rev().find_map(|r| r.err());
        return Err(Error::BackendUnavailable(format!(
            "scorer failed for all {} candidates: {}",
            candidates.len(),
            last.map(|e| e.to_string()).unwrap_or_default()
        )));
    }

    let results = candidates
        .iter()
        .zip(scored)
        .map(|(c, r)| {
            let (relevance, scorer_failed) = match r {
                Ok(s) => (s, false),
                Err(_) => (0.0, true),
            };
            RerankedResult {
                image_id: c.image_id.clone(),
                relevance,
                stage1_score: c.stage1_score,
                best_region: c.best_region,
                scorer_failed,
            }
        })
        .collect();
    Ok(sort_and_cut(results, n_k))
}
