//! Grounding: ask the grounder for a box, then pick the indexed mask whose
//! own box overlaps it best.

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::backend::{FanOut, Grounder, ImageQuery};
use crate::error::{Error, Result};
use crate::index::GalleryIndex;
use crate::mask::bbox_iou;
use crate::model::{BoundingBox, ImageEntry, RegionMask};
use crate::rerank::RerankedResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundingSource {
    GrounderMatched,
    Stage1Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedResult {
    pub image_id: String,
    pub relevance: f64,
    pub stage1_score: f64,
    /// `None` only for images without regions.
    pub mask_id: Option<u64>,
    pub mask: Option<RegionMask>,
    pub matched_iou: f64,
    pub source: GroundingSource,
    pub scorer_failed: bool,
}

/// Region whose box has the highest IoU with `target`; ties go to the
/// smallest mask id.
pub fn match_mask(target: &BoundingBox, entry: &ImageEntry) -> Result<(u64, f64)> {
    let mut best: Option<(u64, f64)> = None;
    for r in &entry.regions {
        let iou = bbox_iou(target, &r.bbox);
        best = match best {
            Some((id, b)) if b > iou || (b == iou && id < r.mask_id) => Some((id, b)),
            _ => Some((r.mask_id, iou)),
        };
    }
    best.ok_or_else(|| Error::NoRegions(entry.image_id.clone()))
}

/// Converts corner coordinates to a box clipped to the image. Returns `None`
/// for non-finite or empty boxes.
pub fn clamp_box(corners: [f64; 4], width: u32, height: u32) -> Option<BoundingBox> {
    if corners.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let (w, h) = (f64::from(width), f64::from(height));
    let x1 = corners[0].clamp(0.0, w);
    let y1 = corners[1].clamp(0.0, h);
    let x2 = corners[2].clamp(0.0, w);
    let y2 = corners[3].clamp(0.0, h);
    (x2 > x1 && y2 > y1).then(|| BoundingBox::from_corners(x1, y1, x2, y2))
}

fn fallback(r: &RerankedResult, entry: Option<&ImageEntry>) -> GroundedResult {
    let mask = r
        .best_region
        .and_then(|id| entry.and_then(|e| e.region(id)))
        .map(|reg| reg.mask.clone());
    GroundedResult {
        image_id: r.image_id.clone(),
        relevance: r.relevance,
        stage1_score: r.stage1_score,
        mask_id: r.best_region,
        mask,
        matched_iou: 0.0,
        source: GroundingSource::Stage1Fallback,
        scorer_failed: r.scorer_failed,
    }
}

/// Every result grounded to its stage-1 mask, used when the grounder is down.
pub fn fallback_grounding(
    reranked: &[RerankedResult],
    index: &GalleryIndex,
) -> Vec<GroundedResult> {
    reranked
        .iter()
        .map(|r| fallback(r, index.image(&r.image_id)))
        .collect()
}

/// Selects the mask for `box_corners` or falls back to the stage-1 region.
pub fn select_mask(r: &RerankedResult, entry: &ImageEntry, boxes: &[[f64; 4]]) -> GroundedResult {
    let Some(target) = boxes
        .first()
        .and_then(|b| clamp_box(*b, entry.width, entry.height))
    else {
        return fallback(r, Some(entry));
    };
    match match_mask(&target, entry) {
        Ok((mask_id, iou)) if iou > 0.0 => GroundedResult {
            image_id: r.image_id.clone(),
            relevance: r.relevance,
            stage1_score: r.stage1_score,
            mask_id: Some(mask_id),
            mask: entry.region(mask_id).map(|reg| reg.mask.clone()),
            matched_iou: iou,
            source: GroundingSource::GrounderMatched,
            scorer_failed: r.scorer_failed,
        },
        _ => fallback(r, Some(entry)),
    }
}

/// Grounds each reranked image, preserving order.
///
/// Only the first returned box is used. Images without regions are not sent
/// to the grounder. If every grounder call fails the grounder is treated as
/// down and [`Error::BackendUnavailable`] is returned.
pub async fn ground(
    query_text: &str,
    reranked: &[RerankedResult],
    grounder: &dyn Grounder,
    index: &GalleryIndex,
    fan_out: &FanOut,
) -> Result<Vec<GroundedResult>> {
    let calls = reranked.iter().map(|r| async move {
        let entry = index
            .image(&r.image_id)
            .ok_or_else(|| Error::UnknownImage(r.image_id.clone()))?;
        if entry.regions.is_empty() {
            return Ok((fallback(r, Some(entry)), None));
        }
        let query = ImageQuery {
            image_uri: entry.backend_uri().to_owned(),
            object_text: query_text.to_owned(),
        };
        let outcome = fan_out
            .call("grounder", &r.image_id, || grounder.ground(&query))
            .await;
        Ok(match outcome.result {
            Ok(resp) => (select_mask(r, entry, &resp.boxes), Some(true)),
            Err(_) => (fallback(r, Some(entry)), Some(false)),
        })
    });
    let done: Vec<Result<(GroundedResult, Option<bool>)>> = join_all(calls).await;
    let done = done.into_iter().collect::<Result<Vec<_>>>()?;

    let attempted = done.iter().filter(|(_, ok)| ok.is_some()).count();
    let failed = done.iter().filter(|(_, ok)| *ok == Some(false)).count();
    if attempted > 0 && failed == attempted {
        return Err(Error::BackendUnavailable(format!(
            "grounder failed for all {attempted} images"
        )));
    }
    Ok(done.into_iter().map(|(g, _)| g).collect())
}
