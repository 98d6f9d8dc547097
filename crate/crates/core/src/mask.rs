//! Run-length mask codec and mask geometry.
//!
//! All operations work on the uncompressed COCO layout: column-major runs,
//! background first. Area, box and IoU are computed on the runs directly
//! without materializing the pixel grid.

use crate::error::{Error, Result};
use crate::model::{BoundingBox, MaskGrid, RegionMask};

/// Expands a run-length mask into a dense grid.
pub fn rle_decode(mask: &RegionMask) -> MaskGrid {
    let (h, w) = (mask.height() as usize, mask.width() as usize);
    let mut data = Vec::with_capacity(h * w);
    let mut value = false;
    for &run in mask.counts() {
        data.extend(std::iter::repeat_n(value, run as usize));
        value = !value;
    }
    MaskGrid::from_column_major(h, w, data)
}

/// Compresses a dense grid into runs.
pub fn rle_encode(grid: &MaskGrid) -> Result<RegionMask> {
    if grid.height() == 0 || grid.width() == 0 {
        return Err(Error::InvalidInput("cannot encode an empty grid".into()));
    }
    let height =
        u32::try_from(grid.height()).map_err(|_| Error::InvalidInput("grid too tall".into()))?;
    let width =
        u32::try_from(grid.width()).map_err(|_| Error::InvalidInput("grid too wide".into()))?;

    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &px in grid.as_column_major() {
        if px != current {
            counts.push(run);
            run = 0;
            current = px;
        }
        run += 1;
    }
    counts.push(run);
    RegionMask::new(height, width, counts)
}

/// Tightest integer-aligned box around the foreground pixels.
pub fn bbox_from_mask(mask: &RegionMask) -> Result<BoundingBox> {
    let h = u64::from(mask.height());
    let (mut x0, mut x1) = (u64::MAX, 0u64);
    let (mut y0, mut y1) = (u64::MAX, 0u64);
    for (start, end) in mask.foreground_runs() {
        let last = end - 1;
        let (c0, c1) = (start / h, last / h);
        x0 = x0.min(c0);
        x1 = x1.max(c1);
        if c0 == c1 {
            y0 = y0.min(start % h);
            y1 = y1.max(last % h);
        } else {
            // A run that wraps into the next column touches both the last row
            // of its first column and the first row of its last column.
            y0 = 0;
            y1 = h - 1;
        }
    }
    if x0 == u64::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(BoundingBox::new(
        x0 as f64,
        y0 as f64,
        (x1 - x0 + 1) as f64,
        (y1 - y0 + 1) as f64,
    ))
}

/// Number of foreground pixels shared by two masks of equal size.
fn intersection_area(a: &RegionMask, b: &RegionMask) -> u64 {
    let mut ia = a.foreground_runs().peekable();
    let mut ib = b.foreground_runs().peekable();
    let mut total = 0u64;
    while let (Some(&(s0, e0)), Some(&(s1, e1))) = (ia.peek(), ib.peek()) {
        let lo = s0.max(s1);
        let hi = e0.min(e1);
        if hi > lo {
            total += hi - lo;
        }
        if e0 <= e1 {
            ia.next();
        } else {
            ib.next();
        }
    }
    total
}

/// Pixelwise intersection-over-union of two masks of equal size.
pub fn mask_iou(a: &RegionMask, b: &RegionMask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::InvalidInput(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Intersection-over-union of two boxes; zero when the union has no area.
pub fn bbox_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rle(h: u32, w: u32, counts: &[u32]) -> RegionMask {
        RegionMask::new(h, w, counts.to_vec()).unwrap()
    }

    #[test]
    fn decode_all_background() {
        let g = rle_decode(&rle(2, 2, &[4]));
        assert_eq!(g.count_ones(), 0);
    }

    #[test]
    fn decode_all_foreground() {
        let g = rle_decode(&rle(2, 2, &[0, 4]));
        assert_eq!(g.count_ones(), 4);
    }

    #[test]
    fn decode_column_major_order() {
        let g = rle_decode(&rle(2, 2, &[1, 2, 1]));
        assert!(g.get(1, 0));
        assert!(g.get(0, 1));
        assert!(!g.get(0, 0));
        assert!(!g.get(1, 1));
    }

    #[test]
    fn encode_examples() {
        let g = MaskGrid::new(3, 3);
        assert_eq!(rle_encode(&g).unwrap().counts(), &[9]);
        let mut g = MaskGrid::new(3, 3);
        g.set(0, 0, true);
        assert_eq!(rle_encode(&g).unwrap().counts(), &[0, 1, 8]);
    }

    #[test]
    fn encode_empty_grid_fails() {
        assert!(matches!(
            rle_encode(&MaskGrid::new(0, 3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn bbox_examples() {
        let full = rle(4, 5, &[0, 20]);
        assert_eq!(
            bbox_from_mask(&full).unwrap(),
            BoundingBox::new(0.0, 0.0, 5.0, 4.0)
        );

        let mut g = MaskGrid::new(3, 4);
        g.set(1, 2, true);
        let single = rle_encode(&g).unwrap();
        assert_eq!(
            bbox_from_mask(&single).unwrap(),
            BoundingBox::new(2.0, 1.0, 1.0, 1.0)
        );

        assert!(matches!(
            bbox_from_mask(&rle(3, 3, &[9])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn bbox_of_wrapping_run() {
        // rows 2..3 of column 0 and rows 0..0 of column 1 in a 3-row mask
        let m = rle(3, 2, &[2, 2, 2]);
        assert_eq!(
            bbox_from_mask(&m).unwrap(),
            BoundingBox::new(0.0, 0.0, 2.0, 3.0)
        );
    }

    #[test]
    fn box_iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(bbox_iou(&a, &a), 1.0);
        assert_eq!(bbox_iou(&a, &BoundingBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        let b = BoundingBox::new(5.0, 5.0, 10.0, 10.0);
        assert!((bbox_iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        let z = BoundingBox::new(3.0, 3.0, 0.0, 0.0);
        assert_eq!(bbox_iou(&z, &z), 0.0);
    }

    #[test]
    fn mask_iou_examples() {
        let a = rle(2, 2, &[1, 2, 1]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = rle(2, 2, &[0, 1, 2, 1]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        assert!(mask_iou(&a, &rle(1, 4, &[4])).is_err());
    }
}
