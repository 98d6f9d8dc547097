//! Seeded synthetic galleries for tests, benchmarks and demos.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::index::{GalleryIndex, ManifestLine};
use crate::metrics::GroundTruth;
use crate::model::{BoundingBox, ImageEntry, RegionMask, RegionRecord};

/// Mask covering the axis-aligned rectangle `[x, x+w) x [y, y+h)`.
pub fn rect_mask(height: u32, width: u32, x: u32, y: u32, w: u32, h: u32) -> RegionMask {
    assert!(
        w > 0 && h > 0 && x + w <= width && y + h <= height,
        "rectangle out of bounds"
    );
    let mut counts: Vec<u32> = vec![0];
    let mut push = |fg: bool, len: u32| {
        if len == 0 {
            return;
        }
        let last_is_fg = counts.len() % 2 == 0;
        if last_is_fg == fg {
            *counts.last_mut().expect("non-empty") += len;
        } else {
            counts.push(len);
        }
    };
    push(false, x * height + y);
    for col in 0..w {
        push(true, h);
        if col + 1 < w {
            push(false, height - h);
        }
    }
    push(false, (width - x - w) * height + (height - y - h));
    RegionMask::new(height, width, counts).expect("rectangle runs are valid")
}

fn random_unit(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (f64::from(*x) / n) as f32).collect();
        }
    }
}

fn random_rect(rng: &mut StdRng, height: u32, width: u32) -> (u32, u32, u32, u32) {
    let w = rng.random_range(1..=width);
    let h = rng.random_range(1..=height);
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    (x, y, w, h)
}

/// Gallery with known answers: each query has a planted direction, and each
/// relevant image holds one region aligned with it whose mask is the ground
/// truth. Other regions carry random directions.
#[derive(Debug, Clone)]
pub struct PlantedGallery {
    pub index: GalleryIndex,
    pub ground_truth: Vec<GroundTruth>,
    /// Query text to the planted query vector.
    pub query_vectors: BTreeMap<String, Vec<f32>>,
}

impl PlantedGallery {
    pub fn query_text(q: usize) -> String {
        format!("object {q}")
    }

    pub fn image_id(i: usize) -> String {
        format!("img_{i:04}")
    }
}

/// `images` images of 32x32 pixels with three regions each, split evenly
/// across `queries` queries (image `i` is relevant to query `i % queries`).
pub fn planted_gallery(images: usize, queries: usize, dim: usize, seed: u64) -> PlantedGallery {
    assert!(queries > 0 && dim >= 2);
    let mut rng = StdRng::seed_from_u64(seed);
    let query_vectors: Vec<Vec<f32>> = (0..queries).map(|_| random_unit(&mut rng, dim)).collect();
    // Three disjoint rectangles with distinct boxes.
    let slots = [(0u32, 0u32, 12u32, 10u32), (16, 2, 14, 12), (4, 18, 20, 12)];
    let (h, w) = (32u32, 32u32);

    let mut entries = Vec::with_capacity(images);
    let mut embeddings = Vec::with_capacity(images * 3 * dim);
    let mut relevant: Vec<BTreeMap<String, Vec<RegionMask>>> = vec![BTreeMap::new(); queries];
    let mut row = 0;
    for i in 0..images {
        let q = i % queries;
        let planted_slot = rng.random_range(0..slots.len());
        let mut regions = Vec::new();
        for (s, &(x, y, rw, rh)) in slots.iter().enumerate() {
            let mask = rect_mask(h, w, x, y, rw, rh);
            let v = if s == planted_slot {
                let noise = random_unit(&mut rng, dim);
                query_vectors[q]
                    .iter()
                    .zip(&noise)
                    .map(|(a, b)| a + 0.05 * b)
                    .collect()
            } else {
                random_unit(&mut rng, dim)
            };
            embeddings.extend(v);
            if s == planted_slot {
                relevant[q].insert(PlantedGallery::image_id(i), vec![mask.clone()]);
            }
            regions.push(RegionRecord {
                mask_id: s as u64 + 1,
                bbox: BoundingBox::new(f64::from(x), f64::from(y), f64::from(rw), f64::from(rh)),
                mask,
                embedding_row: row,
            });
            row += 1;
        }
        entries.push(ImageEntry {
            image_id: PlantedGallery::image_id(i),
            width: w,
            height: h,
            uri: Some(format!("mem://{}", PlantedGallery::image_id(i))),
            regions,
        });
    }
    let index =
        GalleryIndex::from_entries(dim, entries, embeddings).expect("planted gallery is valid");
    let ground_truth = relevant
        .into_iter()
        .enumerate()
        .map(|(q, rel)| GroundTruth {
            query_id: format!("q{q:02}"),
            text: PlantedGallery::query_text(q),
            relevant: rel,
        })
        .collect();
    let query_vectors = query_vectors
        .into_iter()
        .enumerate()
        .map(|(q, v)| (PlantedGallery::query_text(q), v))
        .collect();
    PlantedGallery {
        index,
        ground_truth,
        query_vectors,
    }
}

/// Random gallery with up to `max_images` images of up to `max_regions`
/// regions each. About one region in eight duplicates an earlier vector so
/// that exact ties occur.
pub fn random_gallery(
    rng: &mut StdRng,
    max_images: usize,
    max_regions: usize,
    dim: usize,
) -> GalleryIndex {
    let n_images = rng.random_range(1..=max_images);
    let mut entries = Vec::with_capacity(n_images);
    let mut embeddings: Vec<f32> = Vec::new();
    let mut row = 0;
    for i in 0..n_images {
        let (h, w) = (rng.random_range(1..=16u32), rng.random_range(1..=16u32));
        let n = rng.random_range(0..=max_regions);
        let mut regions = Vec::with_capacity(n);
        for j in 0..n {
            let (x, y, rw, rh) = random_rect(rng, h, w);
            let v = if row > 0 && rng.random_bool(0.125) {
                let src = rng.random_range(0..row);
                embeddings[src * dim..(src + 1) * dim].to_vec()
            } else {
                (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
            };
            embeddings.extend(v);
            regions.push(RegionRecord {
                mask_id: (j as u64) * 3 + rng.random_range(0..3),
                mask: rect_mask(h, w, x, y, rw, rh),
                bbox: BoundingBox::new(f64::from(x), f64::from(y), f64::from(rw), f64::from(rh)),
                embedding_row: row,
            });
            row += 1;
        }
        entries.push(ImageEntry {
            image_id: format!("r{:03}", rng.random_range(0..1000) * 100 + i),
            width: w,
            height: h,
            uri: None,
            regions,
        });
    }
    // vectors drawn from a cube are never all-zero in practice; retry if so
    GalleryIndex::from_entries(dim, entries, embeddings)
        .unwrap_or_else(|_| random_gallery(rng, max_images, max_regions, dim))
}

/// Writes a manifest and blob for `images x regions` random regions on
/// 64x64 images. Returns the number of rows written.
pub fn write_synthetic_manifest(
    images: usize,
    regions: usize,
    dim: usize,
    seed: u64,
    mut manifest: impl Write,
    mut blob: impl Write,
) -> io::Result<usize> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (h, w) = (64u32, 64u32);
    let mut row = 0;
    let mut buf = Vec::with_capacity(dim * 4);
    for i in 0..images {
        let image_id = format!("img_{i:06}");
        for j in 0..regions {
            let (x, y, rw, rh) = random_rect(&mut rng, h, w);
            let line = ManifestLine {
                image_id: image_id.clone(),
                width: w,
                height: h,
                uri: None,
                mask_id: Some(j as u64),
                bbox: Some(BoundingBox::new(
                    f64::from(x),
                    f64::from(y),
                    f64::from(rw),
                    f64::from(rh),
                )),
                rle: Some(rect_mask(h, w, x, y, rw, rh)),
                embedding_row: Some(row),
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.write_all(b"\n")?;
            buf.clear();
            for _ in 0..dim {
                buf.extend_from_slice(&rng.random_range(-1.0f32..1.0).to_le_bytes());
            }
            blob.write_all(&buf)?;
            row += 1;
        }
    }
    Ok(row)
}

/// Random query direction of size `dim`.
pub fn random_query(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    random_unit(rng, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{bbox_from_mask, rle_decode};

    #[test]
    fn rect_mask_matches_pixels() {
        let m = rect_mask(5, 4, 1, 2, 2, 3);
        let g = rle_decode(&m);
        for r in 0..5 {
            for c in 0..4 {
                assert_eq!(g.get(r, c), (1..3).contains(&c) && (2..5).contains(&r));
            }
        }
        assert_eq!(
            bbox_from_mask(&m).unwrap(),
            BoundingBox::new(1.0, 2.0, 2.0, 3.0)
        );
        assert_eq!(rect_mask(3, 3, 0, 0, 3, 3).counts(), &[0, 9]);
    }

    #[test]
    fn planted_gallery_shape() {
        let p = planted_gallery(50, 10, 16, 1);
        assert_eq!(p.index.len(), 50);
        assert_eq!(p.index.total_regions(), 150);
        assert_eq!(p.ground_truth.len(), 10);
        assert!(p.ground_truth.iter().all(|g| g.relevant.len() == 5));
    }
}
