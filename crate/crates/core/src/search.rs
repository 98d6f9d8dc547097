//! Stage-1 retrieval: an image scores the maximum cosine similarity between
//! the query and any of its region embeddings.
//!
//! Stored rows are unit-norm, so cosine reduces to a dot product. The result
//! order is total: score descending, then image id ascending. The parallel
//! and sequential scans produce identical output.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::GalleryIndex;
use crate::kernel::dot;
use crate::model::{check_embedding, ImageEntry};

/// Score given to images that have no regions; below any cosine.
pub const NO_REGION_SCORE: f64 = -1.0;

const NORM_TOLERANCE: f64 = 1e-4;

/// Unit-norm text query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding(Vec<f32>);

impl QueryEmbedding {
    /// Wraps an already-normalized vector; rejects norms off by more than 1e-4.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_finite(&values)?;
        let norm = l2(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidQuery(format!("query norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(values: &[f32]) -> Result<Self> {
        ensemble_query(&[values.to_vec()])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidQuery("empty embedding".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidQuery(
            "embedding has non-finite components".into(),
        ));
    }
    Ok(())
}

fn l2(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Averages per-prompt text embeddings and normalizes the mean.
pub fn ensemble_query(per_prompt: &[Vec<f32>]) -> Result<QueryEmbedding> {
    let first = per_prompt
        .first()
        .ok_or_else(|| Error::InvalidQuery("no prompt embeddings".into()))?;
    let dim = first.len();
    let mut mean = vec![0f64; dim];
    for e in per_prompt {
        if e.len() != dim {
            return Err(Error::InvalidQuery(format!(
                "prompt embeddings disagree on dimension ({} vs {dim})",
                e.len()
            )));
        }
        check_finite(e)?;
        if l2(e) == 0.0 {
            return Err(Error::InvalidQuery("zero prompt embedding".into()));
        }
        for (m, &v) in mean.iter_mut().zip(e) {
            *m += f64::from(v);
        }
    }
    let n = per_prompt.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::InvalidQuery(
            "prompt embeddings cancel to zero".into(),
        ));
    }
    Ok(QueryEmbedding(
        mean.iter().map(|m| (m / norm) as f32).collect(),
    ))
}

/// Candidate cutoff after stage 1 (`n_c`) and results kept after reranking (`n_k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub n_c: usize,
    pub n_k: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { n_c: 100, n_k: 50 }
    }
}

impl SearchParams {
    pub fn new(n_c: usize, n_k: usize) -> Result<Self> {
        let p = Self { n_c, n_k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_k == 0 || self.n_k > self.n_c {
            return Err(Error::InvalidInput(format!(
                "need 1 <= n_k <= n_c, got n_k={} n_c={}",
                self.n_k, self.n_c
            )));
        }
        Ok(())
    }
}

/// An image scored by stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub image_id: String,
    pub stage1_score: f64,
    /// Mask attaining the maximum; `None` for images without regions.
    pub best_region: Option<u64>,
}

/// Canonical stage-1 order: score descending, image id ascending.
pub fn stage1_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    image: usize,
    score: f64,
    best: Option<u64>,
}

fn score_entry(q: &[f32], entry: &ImageEntry, index: &GalleryIndex) -> (f64, Option<u64>) {
    let mut best: Option<(f64, u64)> = None;
    for r in &entry.regions {
        let s = dot(q, index.row(r.embedding_row));
        best = match best {
            Some((bs, bid)) if bs > s || (bs == s && bid < r.mask_id) => Some((bs, bid)),
            _ => Some((s, r.mask_id)),
        };
    }
    match best {
        Some((s, id)) => (s, Some(id)),
        None => (NO_REGION_SCORE, None),
    }
}

/// Maximum cosine between `q` and the image's regions; ties go to the
/// smallest mask id.
pub fn score_image(q: &QueryEmbedding, entry: &ImageEntry, index: &GalleryIndex) -> RankedResult {
    let (stage1_score, best_region) = score_entry(q.as_slice(), entry, index);
    RankedResult {
        image_id: entry.image_id.clone(),
        stage1_score,
        best_region,
    }
}

/// Mask selected by stage-1 similarity alone.
pub fn stage1_ground(q: &QueryEmbedding, entry: &ImageEntry, index: &GalleryIndex) -> Result<u64> {
    score_image(q, entry, index)
        .best_region
        .ok_or_else(|| Error::NoRegions(entry.image_id.clone()))
}

fn check_dimension(q: &QueryEmbedding, index: &GalleryIndex) -> Result<()> {
    check_embedding(q.as_slice(), index.dimension())
}

fn top_candidates(mut scored: Vec<Scored>, index: &GalleryIndex, n_c: usize) -> Vec<RankedResult> {
    let images = index.images();
    let cmp = |a: &Scored, b: &Scored| {
        stage1_order(
            a.score,
            &images[a.image].image_id,
            b.score,
            &images[b.image].image_id,
        )
    };
    if n_c == 0 {
        return Vec::new();
    }
    if scored.len() > n_c {
        scored.select_nth_unstable_by(n_c - 1, cmp);
        scored.truncate(n_c);
    }
    scored.sort_unstable_by(cmp);
    scored
        .into_iter()
        .map(|s| RankedResult {
            image_id: images[s.image].image_id.clone(),
            stage1_score: s.score,
            best_region: s.best,
        })
        .collect()
}

/// Single-threaded full scan.
pub fn search_sequential(
    q: &QueryEmbedding,
    index: &GalleryIndex,
    params: &SearchParams,
) -> Result<Vec<RankedResult>> {
    check_dimension(q, index)?;
    let scored = index
        .images()
        .iter()
        .enumerate()
        .map(|(image, e)| {
            let (score, best) = score_entry(q.as_slice(), e, index);
            Scored { image, score, best }
        })
        .collect();
    Ok(top_candidates(scored, index, params.n_c))
}

/// Full scan with images partitioned across the current rayon pool.
#[cfg(feature = "parallel")]
pub fn search_parallel(
    q: &QueryEmbedding,
    index: &GalleryIndex,
    params: &SearchParams,
) -> Result<Vec<RankedResult>> {
    use rayon::prelude::*;

    check_dimension(q, index)?;
    let scored = index
        .images()
        .par_iter()
        .enumerate()
        .with_min_len(16)
        .map(|(image, e)| {
            let (score, best) = score_entry(q.as_slice(), e, index);
            Scored { image, score, best }
        })
        .collect();
    Ok(top_candidates(scored, index, params.n_c))
}

/// Returns the top `n_c` images in canonical order.
pub fn search(
    q: &QueryEmbedding,
    index: &GalleryIndex,
    params: &SearchParams,
) -> Result<Vec<RankedResult>> {
    #[cfg(feature = "parallel")]
    {
        search_parallel(q, index, params)
    }
    #[cfg(not(feature = "parallel"))]
    {
        search_sequential(q, index, params)
    }
}
