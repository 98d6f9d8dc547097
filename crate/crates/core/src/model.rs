//! Domain types shared by the index, search, grounding and metrics modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `(x, y)` top-left with extents
/// `w` and `h`. Area is `w * h` (continuous semantics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Builds a box from corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    /// True when all coordinates are finite and both extents are non-negative.
    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
            && self.w >= 0.0
            && self.h >= 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Uncompressed COCO-style run-length mask.
///
/// Runs are column-major and alternate background/foreground starting with
/// background; a leading zero means the first pixel is foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RleJson", into = "RleJson")]
pub struct RegionMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RleJson {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl TryFrom<RleJson> for RegionMask {
    type Error = Error;

    fn try_from(v: RleJson) -> Result<Self> {
        RegionMask::new(v.size[0], v.size[1], v.counts)
    }
}

impl From<RegionMask> for RleJson {
    fn from(m: RegionMask) -> Self {
        RleJson {
            size: [m.height, m.width],
            counts: m.counts,
        }
    }
}

impl RegionMask {
    /// Validates and wraps run lengths for a `height x width` mask.
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::MalformedMask(format!(
                "zero-sized mask {height}x{width}"
            )));
        }
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let expected = u64::from(height) * u64::from(width);
        if total != expected {
            return Err(Error::MalformedMask(format!(
                "run lengths sum to {total}, expected {height}x{width} = {expected}"
            )));
        }
        if let Some(pos) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(Error::MalformedMask(format!(
                "zero-length run at position {}",
                pos + 1
            )));
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }

    /// Number of foreground pixels (sum of the odd-indexed runs).
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| u64::from(c))
            .sum()
    }

    /// Iterates foreground runs as half-open `[start, end)` column-major offsets.
    pub fn foreground_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += u64::from(c);
            (i % 2 == 1 && c > 0).then_some((start, pos))
        })
    }
}

/// Dense binary mask, stored column-major to mirror the RLE order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut grid = Self::new(height, width);
        for col in 0..width {
            for row in 0..height {
                grid.data[col * height + row] = f(row, col);
            }
        }
        grid
    }

    pub(crate) fn from_column_major(height: usize, width: usize, data: Vec<bool>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[col * self.height + row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[col * self.height + row] = value;
    }

    /// Pixels in column-major order.
    pub fn as_column_major(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// One mask proposal of an image with its derived box and embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub mask_id: u64,
    pub mask: RegionMask,
    pub bbox: BoundingBox,
    pub embedding_row: usize,
}

/// A gallery image and its region proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub uri: Option<String>,
    pub regions: Vec<RegionRecord>,
}

impl ImageEntry {
    /// Location handed to backends. Falls back to the image id when no URI
    /// was recorded.
    pub fn backend_uri(&self) -> &str {
        self.uri.as_deref().unwrap_or(&self.image_id)
    }

    pub fn region(&self, mask_id: u64) -> Option<&RegionRecord> {
        self.regions.iter().find(|r| r.mask_id == mask_id)
    }
}

/// Checks that `values` has `dim` finite components.
pub fn check_embedding(values: &[f32], dim: usize) -> Result<()> {
    if values.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "embedding has non-finite components".into(),
        ));
    }
    Ok(())
}
