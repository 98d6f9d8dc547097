//! Image-level (mAP@50) and object-level (mAP@50@50) retrieval metrics,
//! plus the ground-truth and results-dump JSONL formats they consume.
//!
//! "@50" is a rank cutoff. An object-level hit additionally requires the
//! predicted mask to reach IoU >= 0.5 with any ground-truth mask of the image.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::GalleryIndex;
use crate::mask::mask_iou;
use crate::model::RegionMask;

pub const RANK_CUTOFF: usize = 50;
pub const MASK_IOU_THRESHOLD: f64 = 0.5;

/// Average precision over the first `k` entries, normalized by
/// `min(total_relevant, k)`. `None` means the query has no relevant items
/// and must be excluded from the mean.
pub fn average_precision_at_k(
    ranked_hits: &[bool],
    total_relevant: usize,
    k: usize,
) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let denom = total_relevant.min(k);
    if denom == 0 {
        return Some(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in ranked_hits.iter().take(k).enumerate().filter(|(_, &h)| h) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    Some(sum / denom as f64)
}

/// One query's relevant images and their ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub query_id: String,
    pub text: String,
    pub relevant: BTreeMap<String, Vec<RegionMask>>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthLine {
    query_id: String,
    text: String,
    relevant: Vec<RelevantLine>,
}

#[derive(Serialize, Deserialize)]
struct RelevantLine {
    image_id: String,
    masks: Vec<RegionMask>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses ground-truth JSONL, one query per line.
pub fn read_ground_truth(reader: impl BufRead) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroundTruthLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if !ids.insert(rec.query_id.clone()) {
            return Err(parse_err(
                lineno,
                format!("duplicate query_id {:?}", rec.query_id),
            ));
        }
        let mut relevant = BTreeMap::new();
        for r in rec.relevant {
            if r.masks.is_empty() {
                return Err(parse_err(
                    lineno,
                    format!("relevant image {:?} has no masks", r.image_id),
                ));
            }
            if relevant.insert(r.image_id.clone(), r.masks).is_some() {
                return Err(parse_err(
                    lineno,
                    format!("image {:?} listed twice", r.image_id),
                ));
            }
        }
        out.push(GroundTruth {
            query_id: rec.query_id,
            text: rec.text,
            relevant,
        });
    }
    Ok(out)
}

pub fn write_ground_truth(gt: &[GroundTruth], mut w: impl Write) -> Result<()> {
    for q in gt {
        let line = GroundTruthLine {
            query_id: q.query_id.clone(),
            text: q.text.clone(),
            relevant: q
                .relevant
                .iter()
                .map(|(id, masks)| RelevantLine {
                    image_id: id.clone(),
                    masks: masks.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Checks that ground-truth images exist in the gallery with matching sizes.
pub fn validate_ground_truth(gt: &[GroundTruth], index: &GalleryIndex) -> Result<()> {
    for q in gt {
        for (image_id, masks) in &q.relevant {
            let entry = index.image(image_id).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "query {:?}: image {image_id:?} is not in the gallery",
                    q.query_id
                ))
            })?;
            if let Some(m) = masks
                .iter()
                .find(|m| m.height() != entry.height || m.width() != entry.width)
            {
                return Err(Error::InvalidInput(format!(
                    "query {:?}: mask for {image_id:?} is {}x{}, image is {}x{}",
                    q.query_id,
                    m.height(),
                    m.width(),
                    entry.height,
                    entry.width
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub image_id: String,
    pub mask: Option<RegionMask>,
    pub score: f64,
}

/// Final ranked list for one query, as written to a results dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query_id: String,
    pub ranking: Vec<RankedItem>,
}

pub fn read_results(reader: impl BufRead) -> Result<Vec<QueryRanking>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRanking =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if !ids.insert(rec.query_id.clone()) {
            return Err(parse_err(
                lineno,
                format!("duplicate query_id {:?}", rec.query_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_results(results: &[QueryRanking], mut w: impl Write) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    pub relevant: usize,
    /// `None` for excluded queries.
    pub ap_50: Option<f64>,
    pub ap_50_50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoff: usize,
    pub map_50: f64,
    pub map_50_50: f64,
    pub evaluated_queries: usize,
    pub excluded_queries: Vec<String>,
    /// Ground-truth queries with no ranking in the results (scored as AP 0).
    pub missing_queries: Vec<String>,
    pub fallback_grounded: usize,
    pub failed_scored: usize,
    pub per_query: Vec<QueryReport>,
}

/// Hit vectors for one ranking. Repeated image ids only count once.
fn hit_vectors(
    ranking: &[RankedItem],
    gt: &GroundTruth,
    k: usize,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let mut seen = HashSet::new();
    let mut image_hits = Vec::with_capacity(k.min(ranking.len()));
    let mut object_hits = Vec::with_capacity(k.min(ranking.len()));
    for item in ranking.iter().take(k) {
        let first = seen.insert(item.image_id.as_str());
        let gt_masks = if first {
            gt.relevant.get(&item.image_id)
        } else {
            None
        };
        image_hits.push(gt_masks.is_some());
        let object = match (gt_masks, &item.mask) {
            (Some(masks), Some(pred)) => {
                let mut best = 0.0f64;
                for m in masks {
                    best = best.max(mask_iou(pred, m)?);
                }
                best >= MASK_IOU_THRESHOLD
            }
            _ => false,
        };
        object_hits.push(object);
    }
    Ok((image_hits, object_hits))
}

/// Scores rankings against ground truth at rank cutoff `k`. Queries are
/// reduced in query-id order.
pub fn evaluate(results: &[QueryRanking], gt: &[GroundTruth], k: usize) -> Result<EvalReport> {
    let by_query: HashMap<&str, &QueryRanking> =
        results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut order: Vec<&GroundTruth> = gt.iter().collect();
    order.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mut per_query = Vec::with_capacity(order.len());
    let mut excluded = Vec::new();
    let mut missing = Vec::new();
    let (mut sum50, mut sum5050, mut n) = (0.0, 0.0, 0usize);
    for q in order {
        let ranking: &[RankedItem] = match by_query.get(q.query_id.as_str()) {
            Some(r) => &r.ranking,
            None => {
                missing.push(q.query_id.clone());
                &[]
            }
        };
        let (image_hits, object_hits) = hit_vectors(ranking, q, k)?;
        let ap50 = average_precision_at_k(&image_hits, q.relevant.len(), k);
        let ap5050 = average_precision_at_k(&object_hits, q.relevant.len(), k);
        match (ap50, ap5050) {
            (Some(a), Some(b)) => {
                sum50 += a;
                sum5050 += b;
                n += 1;
            }
            _ => excluded.push(q.query_id.clone()),
        }
        per_query.push(QueryReport {
            query_id: q.query_id.clone(),
            relevant: q.relevant.len(),
            ap_50: ap50,
            ap_50_50: ap5050,
        });
    }
    if n == 0 {
        return Err(Error::NoEvaluableQueries);
    }
    Ok(EvalReport {
        cutoff: k,
        map_50: sum50 / n as f64,
        map_50_50: sum5050 / n as f64,
        evaluated_queries: n,
        excluded_queries: excluded,
        missing_queries: missing,
        fallback_grounded: 0,
        failed_scored: 0,
        per_query,
    })
}

/// Image-level mean AP at the top-50 cutoff.
pub fn map_at_50(results: &[QueryRanking], gt: &[GroundTruth]) -> Result<f64> {
    evaluate(results, gt, RANK_CUTOFF).map(|r| r.map_50)
}

/// Object-level mean AP at the top-50 cutoff with mask IoU >= 0.5.
pub fn map_at_50_50(results: &[QueryRanking], gt: &[GroundTruth]) -> Result<f64> {
    evaluate(results, gt, RANK_CUTOFF).map(|r| r.map_50_50)
}
