//! Deterministic stand-ins for the three model backends.
//!
//! A [`MockSpec`] is plain JSON so the same behaviour can be served over
//! HTTP for conformance testing of real adapters. Failure injection is keyed
//! on `(seed, endpoint, request, attempt)`, so outcomes do not depend on the
//! order in which concurrent requests arrive.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, GroundResponse, Grounder, ImageQuery, RelevanceScorer, ScoreResponse,
    TextEmbedder,
};
use crate::index::GalleryIndex;
use crate::mask::mask_iou;
use crate::metrics::GroundTruth;
use crate::pipeline::Backends;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureSpec {
    /// Probability in [0, 1] that a call answers with an error.
    pub error_rate: f64,
    /// Delay added before every answer.
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    /// Exact text to vector lookup.
    pub table: BTreeMap<String, Vec<f32>>,
    /// When set, unknown texts get a seeded pseudo-random vector of this
    /// size; otherwise they are rejected.
    pub dimension: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSpec {
    /// Object text to the image URIs that should be judged relevant.
    pub relevant: BTreeMap<String, Vec<String>>,
    pub relevant_logits: [f64; 2],
    pub irrelevant_logits: [f64; 2],
    /// Swap the two logit pairs.
    pub inverted: bool,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        Self {
            relevant: BTreeMap::new(),
            relevant_logits: [10.0, -10.0],
            irrelevant_logits: [-10.0, 10.0],
            inverted: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrounderSpec {
    /// Object text to image URI to the boxes returned, as `[x1, y1, x2, y2]`.
    pub boxes: BTreeMap<String, BTreeMap<String, Vec<[f64; 4]>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureInjection {
    pub embedder: FailureSpec,
    pub scorer: FailureSpec,
    pub grounder: FailureSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSpec {
    pub seed: u64,
    pub embedder: EmbedderSpec,
    pub scorer: ScorerSpec,
    pub grounder: GrounderSpec,
    pub failures: FailureInjection,
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) determined entirely by its inputs.
fn unit_draw(seed: u64, parts: &[&str], counter: u64) -> f64 {
    let mut h = 0xcbf2_9ce4_8422_2325 ^ splitmix(seed);
    for p in parts {
        h = fnv1a(p.as_bytes(), h);
        h = fnv1a(&[0xff], h);
    }
    (splitmix(h ^ splitmix(counter)) >> 11) as f64 / (1u64 << 53) as f64
}

struct MockState {
    spec: MockSpec,
    attempts: Mutex<HashMap<(String, String), u64>>,
}

impl MockState {
    async fn gate(
        &self,
        endpoint: &str,
        key: &str,
        failure: &FailureSpec,
    ) -> Result<(), BackendError> {
        let attempt = {
            let mut map = self.attempts.lock().expect("attempt counter poisoned");
            let slot = map
                .entry((endpoint.to_owned(), key.to_owned()))
                .or_insert(0);
            *slot += 1;
            *slot
        };
        if failure.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(failure.latency_ms)).await;
        }
        if failure.error_rate > 0.0
            && unit_draw(self.spec.seed, &[endpoint, key], attempt) < failure.error_rate
        {
            return Err(BackendError::Status(503));
        }
        Ok(())
    }
}

/// In-process mock backends. Cloning shares state.
#[derive(Clone)]
pub struct MockBackends {
    state: Arc<MockState>,
}

impl MockBackends {
    pub fn new(spec: MockSpec) -> Self {
        Self {
            state: Arc::new(MockState {
                spec,
                attempts: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn spec(&self) -> &MockSpec {
        &self.state.spec
    }

    /// Total calls received so far on `endpoint` ("embed_text", "score", "ground").
    pub fn calls(&self, endpoint: &str) -> u64 {
        let map = self
            .state
            .attempts
            .lock()
            .expect("attempt counter poisoned");
        map.iter()
            .filter(|((e, _), _)| e == endpoint)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn backends(&self) -> Backends {
        Backends {
            embedder: Some(Arc::new(self.clone())),
            scorer: Some(Arc::new(self.clone())),
            grounder: Some(Arc::new(self.clone())),
        }
    }

    fn vector_for(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let spec = &self.state.spec.embedder;
        if let Some(v) = spec.table.get(text) {
            return Ok(v.clone());
        }
        let dim = spec
            .dimension
            .ok_or_else(|| BackendError::Malformed(format!("no embedding for text {text:?}")))?;
        Ok((0..dim)
            .map(|i| {
                (unit_draw(self.state.spec.seed, &["vector", text], i as u64) * 2.0 - 1.0) as f32
            })
            .collect())
    }
}

#[async_trait]
impl TextEmbedder for MockBackends {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("empty text list".into()));
        }
        let key = texts.join("\u{1f}");
        self.state
            .gate("embed_text", &key, &self.state.spec.failures.embedder)
            .await?;
        texts.iter().map(|t| self.vector_for(t)).collect()
    }
}

#[async_trait]
impl RelevanceScorer for MockBackends {
    async fn score(&self, query: &ImageQuery) -> Result<ScoreResponse, BackendError> {
        let key = format!("{}\u{1f}{}", query.object_text, query.image_uri);
        let spec = &self.state.spec.scorer;
        self.state
            .gate("score", &key, &self.state.spec.failures.scorer)
            .await?;
        let relevant = spec
            .relevant
            .get(&query.object_text)
            .is_some_and(|uris| uris.iter().any(|u| u == &query.image_uri));
        let [z_true, z_false] = if relevant != spec.inverted {
            spec.relevant_logits
        } else {
            spec.irrelevant_logits
        };
        Ok(ScoreResponse { z_true, z_false })
    }
}

#[async_trait]
impl Grounder for MockBackends {
    async fn ground(&self, query: &ImageQuery) -> Result<GroundResponse, BackendError> {
        let key = format!("{}\u{1f}{}", query.object_text, query.image_uri);
        self.state
            .gate("ground", &key, &self.state.spec.failures.grounder)
            .await?;
        let boxes = self
            .state
            .spec
            .grounder
            .boxes
            .get(&query.object_text)
            .and_then(|m| m.get(&query.image_uri))
            .cloned()
            .unwrap_or_default();
        Ok(GroundResponse { boxes })
    }
}

/// Spec for ideal backends on a planted gallery.
///
/// The embedder returns `planted[text]` for each query text, the scorer
/// gives (10, -10) to ground-truth images and (-10, 10) to everything else,
/// and the grounder returns the box of the indexed region that best matches
/// a ground-truth mask (IoU >= 0.5), or no box if none does.
pub fn make_perfect_backends(
    gt: &[GroundTruth],
    index: &GalleryIndex,
    planted: &BTreeMap<String, Vec<f32>>,
) -> MockSpec {
    let mut spec = MockSpec::default();
    spec.embedder.table = planted.clone();
    for q in gt {
        let mut uris = Vec::new();
        let mut boxes = BTreeMap::new();
        for (image_id, gt_masks) in &q.relevant {
            let Some(entry) = index.image(image_id) else {
                continue;
            };
            let uri = entry.backend_uri().to_owned();
            uris.push(uri.clone());
            let mut best: Option<(f64, [f64; 4])> = None;
            for r in &entry.regions {
                let iou = gt_masks
                    .iter()
                    .filter_map(|m| mask_iou(&r.mask, m).ok())
                    .fold(0.0f64, f64::max);
                if iou >= 0.5 && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, [r.bbox.x, r.bbox.y, r.bbox.x2(), r.bbox.y2()]));
                }
            }
            if let Some((_, b)) = best {
                boxes.insert(uri, vec![b]);
            }
        }
        spec.scorer.relevant.insert(q.text.clone(), uris);
        spec.grounder.boxes.insert(q.text.clone(), boxes);
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_deterministic_and_uniformish() {
        let a = unit_draw(7, &["score", "x"], 1);
        assert_eq!(a, unit_draw(7, &["score", "x"], 1));
        assert_ne!(a, unit_draw(8, &["score", "x"], 1));
        let mean = (0..10_000).map(|i| unit_draw(1, &["m"], i)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn spec_json_defaults() {
        let spec: MockSpec = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(spec.scorer.relevant_logits, [10.0, -10.0]);
        assert_eq!(spec.failures.scorer.error_rate, 0.0);
    }

    #[tokio::test]
    async fn scorer_rule_and_inversion() {
        let mut spec = MockSpec::default();
        spec.scorer.relevant.insert("cat".into(), vec!["u1".into()]);
        let m = MockBackends::new(spec.clone());
        let q = |uri: &str| ImageQuery {
            image_uri: uri.into(),
            object_text: "cat".into(),
        };
        assert_eq!(m.score(&q("u1")).await.unwrap().z_true, 10.0);
        assert_eq!(m.score(&q("u2")).await.unwrap().z_true, -10.0);
        spec.scorer.inverted = true;
        let m = MockBackends::new(spec);
        assert_eq!(m.score(&q("u1")).await.unwrap().z_true, -10.0);
        assert_eq!(m.calls("score"), 1);
    }

    #[tokio::test]
    async fn full_failure_rate_always_fails() {
        let mut spec = MockSpec::default();
        spec.failures.grounder.error_rate = 1.0;
        let m = MockBackends::new(spec);
        let q = ImageQuery {
            image_uri: "u".into(),
            object_text: "t".into(),
        };
        for _ in 0..5 {
            assert!(m.ground(&q).await.is_err());
        }
    }

    #[tokio::test]
    async fn embedder_table_and_fallback() {
        let mut spec = MockSpec::default();
        spec.embedder.table.insert("a".into(), vec![1.0, 0.0]);
        let m = MockBackends::new(spec.clone());
        assert_eq!(
            m.embed_text(&["a".into()]).await.unwrap(),
            vec![vec![1.0, 0.0]]
        );
        assert!(m.embed_text(&["b".into()]).await.is_err());
        spec.embedder.dimension = Some(3);
        let m = MockBackends::new(spec);
        let v = m.embed_text(&["b".into()]).await.unwrap();
        assert_eq!(v[0].len(), 3);
        assert_eq!(v, m.embed_text(&["b".into()]).await.unwrap());
    }
}
