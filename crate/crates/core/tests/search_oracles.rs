//! Stage-1 search checked against a brute-force f64 cosine scan.

use matir_core::model::{BoundingBox, ImageEntry, RegionRecord};
use matir_core::search::{search_sequential, NO_REGION_SCORE};
use matir_core::synthetic::{random_gallery, random_query, rect_mask};
use matir_core::{
    ensemble_query, score_image, search, stage1_ground, GalleryIndex, QueryEmbedding, SearchParams,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Reference ranking: every image scored by an explicit loop over regions.
fn brute_force(q: &[f32], index: &GalleryIndex) -> Vec<(String, f64, Option<u64>)> {
    let mut out: Vec<(String, f64, Option<u64>)> = index
        .images()
        .iter()
        .map(|e| {
            let mut best = (-1.0f64, None::<u64>);
            for r in &e.regions {
                let s = cosine(q, index.row(r.embedding_row));
                let better = match best.1 {
                    None => true,
                    Some(id) => s > best.0 || (s == best.0 && r.mask_id < id),
                };
                if better {
                    best = (s, Some(r.mask_id));
                }
            }
            (e.image_id.clone(), best.0, best.1)
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

#[test]
fn search_matches_brute_force_on_random_galleries() {
    let mut rng = StdRng::seed_from_u64(21);
    for trial in 0..600 {
        let dim = [4, 64, 768][trial % 3];
        let index = random_gallery(&mut rng, 20, 20, dim);
        let q = if rng.random_bool(0.2) && index.total_regions() > 0 {
            // query equal to a stored vector produces exact ties and 1.0 scores
            let row = rng.random_range(0..index.total_regions());
            QueryEmbedding::normalized(index.row(row)).unwrap()
        } else {
            QueryEmbedding::normalized(&random_query(&mut rng, dim)).unwrap()
        };
        let n_c = rng.random_range(1..=25);
        let params = SearchParams { n_c, n_k: 1 };
        let got = search(&q, &index, &params).unwrap();
        let want = brute_force(q.as_slice(), &index);
        assert_eq!(got.len(), n_c.min(index.len()));
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.image_id, w.0, "trial {trial}");
            assert!((g.stage1_score - w.1).abs() < 1e-6);
            assert_eq!(g.best_region, w.2);
        }
        assert_eq!(got, search_sequential(&q, &index, &params).unwrap());
    }
}

#[test]
fn score_image_within_1e6_of_f64_reference() {
    let mut rng = StdRng::seed_from_u64(22);
    for _ in 0..200 {
        let index = random_gallery(&mut rng, 3, 20, 768);
        let q = QueryEmbedding::normalized(&random_query(&mut rng, 768)).unwrap();
        for e in index.images() {
            let r = score_image(&q, e, &index);
            let reference = e
                .regions
                .iter()
                .map(|reg| cosine(q.as_slice(), index.row(reg.embedding_row)))
                .fold(NO_REGION_SCORE, f64::max);
            assert!((r.stage1_score - reference).abs() < 1e-6);
        }
    }
}

#[test]
fn stage1_ground_agrees_with_score_image() {
    let mut rng = StdRng::seed_from_u64(23);
    let mut checked = 0;
    while checked < 1000 {
        let index = random_gallery(&mut rng, 4, 10, 8);
        let q = QueryEmbedding::normalized(&random_query(&mut rng, 8)).unwrap();
        for e in index.images().iter().filter(|e| !e.regions.is_empty()) {
            assert_eq!(
                Some(stage1_ground(&q, e, &index).unwrap()),
                score_image(&q, e, &index).best_region
            );
            checked += 1;
        }
    }
}

fn one_image(rows: &[Vec<f32>]) -> GalleryIndex {
    let regions = (0..rows.len())
        .map(|j| RegionRecord {
            mask_id: j as u64,
            mask: rect_mask(4, 4, 0, 0, 1, 1),
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
            embedding_row: j,
        })
        .collect();
    let entry = ImageEntry {
        image_id: "a".into(),
        width: 4,
        height: 4,
        uri: None,
        regions,
    };
    GalleryIndex::from_entries(rows[0].len(), vec![entry], rows.concat()).unwrap()
}

#[test]
fn adding_a_region_never_lowers_the_score() {
    let mut rng = StdRng::seed_from_u64(24);
    for _ in 0..300 {
        let q = QueryEmbedding::normalized(&random_query(&mut rng, 16)).unwrap();
        let mut rows: Vec<Vec<f32>> = vec![random_query(&mut rng, 16)];
        let mut last = f64::NEG_INFINITY;
        for _ in 0..6 {
            let idx = one_image(&rows);
            let s = score_image(&q, &idx.images()[0], &idx).stage1_score;
            assert!(s >= last);
            last = s;
            rows.push(random_query(&mut rng, 16));
        }
    }
}

#[test]
fn positive_scaling_of_the_query_changes_nothing() {
    let mut rng = StdRng::seed_from_u64(25);
    for _ in 0..200 {
        let index = random_gallery(&mut rng, 20, 5, 32);
        let raw: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let c = rng.random_range(0.01f32..100.0);
        let scaled: Vec<f32> = raw.iter().map(|v| v * c).collect();
        let a = search(
            &ensemble_query(&[raw]).unwrap(),
            &index,
            &SearchParams::default(),
        )
        .unwrap();
        let b = search(
            &ensemble_query(&[scaled]).unwrap(),
            &index,
            &SearchParams::default(),
        )
        .unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image_id, y.image_id);
            assert!((x.stage1_score - y.stage1_score).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_scores_order_by_image_id() {
    let rows = [vec![1.0f32, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let entries = ["zeta", "alpha", "mid"]
        .iter()
        .enumerate()
        .map(|(i, id)| ImageEntry {
            image_id: id.to_string(),
            width: 2,
            height: 2,
            uri: None,
            regions: vec![RegionRecord {
                mask_id: 0,
                mask: rect_mask(2, 2, 0, 0, 1, 1),
                bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
                embedding_row: i,
            }],
        })
        .collect();
    let index = GalleryIndex::from_entries(2, entries, rows.concat()).unwrap();
    let q = QueryEmbedding::new(vec![1.0, 0.0]).unwrap();
    let r = search(&q, &index, &SearchParams::default()).unwrap();
    let ids: Vec<_> = r.iter().map(|r| r.image_id.as_str()).collect();
    assert_eq!(ids, ["alpha", "zeta", "mid"]);
}

#[cfg(feature = "parallel")]
#[test]
fn thread_count_does_not_change_results() {
    let mut rng = StdRng::seed_from_u64(26);
    let index = random_gallery(&mut rng, 20, 20, 64);
    let pools: Vec<_> = [1, 2, 8]
        .iter()
        .map(|&n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
        })
        .collect();
    for _ in 0..50 {
        let q = QueryEmbedding::normalized(&random_query(&mut rng, 64)).unwrap();
        let base = search_sequential(&q, &index, &SearchParams::default()).unwrap();
        for pool in &pools {
            let r = pool
                .install(|| {
                    matir_core::search::search_parallel(&q, &index, &SearchParams::default())
                })
                .unwrap();
            assert_eq!(r, base);
        }
    }
}

#[test]
fn loaded_index_answers_identically() {
    let mut rng = StdRng::seed_from_u64(27);
    let index = random_gallery(&mut rng, 20, 20, 64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.idx");
    index.save(&path).unwrap();
    let loaded = GalleryIndex::load(&path).unwrap();
    assert_eq!(loaded, index);
    let bits = |i: &GalleryIndex| {
        i.embeddings()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&loaded), bits(&index));
    for _ in 0..100 {
        let q = QueryEmbedding::normalized(&random_query(&mut rng, 64)).unwrap();
        assert_eq!(
            search(&q, &loaded, &SearchParams::default()).unwrap(),
            search(&q, &index, &SearchParams::default()).unwrap()
        );
    }
}

#[test]
fn building_twice_gives_identical_embeddings() {
    let mut rng = StdRng::seed_from_u64(28);
    let index = random_gallery(&mut rng, 10, 10, 16);
    let (mut m, mut b) = (Vec::new(), Vec::new());
    index.export_manifest(&mut m, &mut b).unwrap();
    let x = matir_core::build_index(&m[..], &b[..], 16).unwrap();
    let y = matir_core::build_index(&m[..], &b[..], 16).unwrap();
    assert_eq!(x, y);
    for row in 0..x.total_regions() {
        let n: f64 = x
            .row(row)
            .iter()
            .map(|v| f64::from(*v).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((n - 1.0).abs() < 1e-4);
    }
}
