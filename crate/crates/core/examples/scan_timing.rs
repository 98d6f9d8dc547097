//! Times one stage-1 query over a synthetic index.
//!
//! `cargo run --release -p matir-core --example scan_timing -- [images] [regions] [dim]`

use std::time::Instant;

use matir_core::model::{BoundingBox, ImageEntry, RegionRecord};
use matir_core::search::{search_sequential, QueryEmbedding, SearchParams};
use matir_core::synthetic::{random_query, rect_mask};
use matir_core::GalleryIndex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let images = args.first().copied().unwrap_or(10_000);
    let regions = args.get(1).copied().unwrap_or(30);
    let dim = args.get(2).copied().unwrap_or(768);

    let mut rng = StdRng::seed_from_u64(1);
    let mask = rect_mask(8, 8, 0, 0, 2, 2);
    let bbox = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
    let entries = (0..images)
        .map(|i| ImageEntry {
            image_id: format!("img_{i:06}"),
            width: 8,
            height: 8,
            uri: None,
            regions: (0..regions)
                .map(|j| RegionRecord {
                    mask_id: j as u64,
                    mask: mask.clone(),
                    bbox,
                    embedding_row: i * regions + j,
                })
                .collect(),
        })
        .collect();
    let embeddings = (0..images * regions * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let index = GalleryIndex::from_entries(dim, entries, embeddings).expect("valid index");
    let q = QueryEmbedding::normalized(&random_query(&mut rng, dim)).unwrap();
    let params = SearchParams::default();

    for _ in 0..5 {
        let t = Instant::now();
        let r = search_sequential(&q, &index, &params).unwrap();
        println!("sequential: {:?} (top {})", t.elapsed(), r[0].image_id);
    }
    #[cfg(feature = "parallel")]
    for threads in [1, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        for _ in 0..3 {
            let t = Instant::now();
            let r = pool
                .install(|| matir_core::search::search_parallel(&q, &index, &params))
                .unwrap();
            println!(
                "parallel x{threads}: {:?} (top {})",
                t.elapsed(),
                r[0].image_id
            );
        }
    }
}
