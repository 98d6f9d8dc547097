use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use matir_core::backend::{FanOut, Grounder, RelevanceScorer, TextEmbedder};
use matir_core::metrics::{
    self, read_ground_truth, read_results, validate_ground_truth, write_results, QueryRanking,
    RANK_CUTOFF,
};
use matir_core::pipeline::SearchOutcome;
use matir_core::{
    ensemble_query, Backends, GalleryIndex, Mode, OutagePolicy, Pipeline, PipelineConfig,
    QueryEmbedding, SearchParams, SearchResponse,
};
use matir_server::client::HttpBackend;
use matir_server::ServiceConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::{
    BackendArgs, BuildIndexArgs, EvaluateArgs, InspectArgs, Result, SearchArgs, ServeArgs,
};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::file(path, e))
}

fn load_index(path: &Path) -> Result<GalleryIndex> {
    GalleryIndex::load(path).map_err(|e| CliError::file(path, e))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Internal(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn print_stats(index: &GalleryIndex, json: bool) -> Result<()> {
    let s = index.stats();
    if json {
        return print_json(&s);
    }
    println!("images      {}", s.images);
    println!("regions     {}", s.regions);
    println!(
        "per image   min {} / mean {:.2} / max {}",
        s.min_regions, s.mean_regions, s.max_regions
    );
    println!("dimension   {}", s.dimension);
    Ok(())
}

pub fn build_index(a: &BuildIndexArgs) -> Result<()> {
    let manifest = open(&a.manifest)?;
    let blob = open(&a.embeddings)?;
    let index = matir_core::build_index(manifest, blob, a.dim)
        .map_err(|e| CliError::user(e.to_string()))?;
    index.save(&a.out).map_err(|e| CliError::file(&a.out, e))?;
    print_stats(&index, a.json)
}

/// Builds the pipeline and picks the deepest mode the configured backends allow.
fn pipeline(
    index: GalleryIndex,
    b: &BackendArgs,
    n_c: usize,
    n_k: usize,
) -> Result<(Pipeline, Mode)> {
    let params = SearchParams::new(n_c, n_k).map_err(|e| CliError::user(e.to_string()))?;
    if b.grounder.is_some() && b.scorer.is_none() {
        return Err(CliError::user("--grounder requires --scorer"));
    }
    if !(b.timeout_s.is_finite() && b.timeout_s > 0.0) {
        return Err(CliError::user("--timeout-s must be positive"));
    }
    let client = |url: &Option<String>| -> Result<Option<Arc<HttpBackend>>> {
        url.as_deref()
            .map(|u| HttpBackend::new(u).map(Arc::new).map_err(CliError::user))
            .transpose()
    };
    let backends = Backends {
        embedder: client(&b.embedder)?.map(|c| c as Arc<dyn TextEmbedder>),
        scorer: client(&b.scorer)?.map(|c| c as Arc<dyn RelevanceScorer>),
        grounder: client(&b.grounder)?.map(|c| c as Arc<dyn Grounder>),
    };
    let mode = match (&b.scorer, &b.grounder) {
        (None, _) => Mode::Stage1,
        (Some(_), None) => Mode::RerankOnly,
        (Some(_), Some(_)) => Mode::Full,
    };
    let config = PipelineConfig {
        params,
        fan_out: FanOut::new(
            b.max_in_flight,
            Duration::from_secs_f64(b.timeout_s),
            b.retries,
        ),
        outage: if b.fail_on_outage {
            OutagePolicy::Fail
        } else {
            OutagePolicy::Degrade
        },
        prompt_templates: b.prompt_templates.clone(),
    };
    let p = Pipeline::new(Arc::new(index), backends, config)?;
    Ok((p, mode))
}

fn read_query_rows(path: &Path, dim: usize) -> Result<QueryEmbedding> {
    let bytes = std::fs::read(path).map_err(|e| CliError::file(path, e))?;
    if bytes.is_empty() || bytes.len() % (4 * dim) != 0 {
        return Err(CliError::user(format!(
            "{}: {} bytes is not a whole number of {dim}-dimensional f32 rows",
            path.display(),
            bytes.len()
        )));
    }
    let rows: Vec<Vec<f32>> = bytes
        .chunks_exact(4 * dim)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect();
    ensemble_query(&rows).map_err(CliError::in_file(path))
}

fn print_table(r: &SearchResponse) {
    println!(
        "{:>4}  {:<24} {:>9} {:>9} {:>8} {:>6}  {}",
        "rank", "image_id", "relevance", "stage1", "mask_id", "iou", "source"
    );
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
    for (i, h) in r.results.iter().enumerate() {
        let source = serde_json::to_value(h.source)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        println!(
            "{:>4}  {:<24} {:>9} {:>9.4} {:>8} {:>6}  {}{}",
            i + 1,
            h.image_id,
            opt(h.relevance, 4),
            h.stage1_score,
            h.mask_id.map_or("-".to_string(), |m| m.to_string()),
            opt(h.matched_iou, 3),
            source,
            if h.scorer_failed {
                " (scorer failed)"
            } else {
                ""
            }
        );
    }
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let q = read_query_rows(&a.query_embedding, index.dimension())?;
    let (p, mode) = pipeline(index, &a.backends, a.nc, a.nk)?;
    if mode != Mode::Stage1 && a.query_text.is_none() {
        return Err(CliError::user("--query-text is required with --scorer"));
    }
    let outcome = runtime()?.block_on(p.run(&q, a.query_text.as_deref(), mode, None))?;
    let response = outcome.into_response(a.query_text.clone());
    if a.json {
        print_json(&response)
    } else {
        print_table(&response);
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    query_id: String,
    text: String,
    #[serde(default)]
    embedding: Option<Vec<f32>>,
}

fn read_queries(path: &Path) -> Result<Vec<QueryLine>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine = serde_json::from_str(&line)
            .map_err(|e| CliError::user(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(q);
    }
    Ok(out)
}

async fn run_query(p: &Pipeline, q: &QueryLine, mode: Mode) -> matir_core::Result<SearchOutcome> {
    let embedding = match &q.embedding {
        Some(v) => {
            if v.len() != p.index().dimension() {
                return Err(matir_core::Error::DimensionMismatch {
                    expected: p.index().dimension(),
                    actual: v.len(),
                });
            }
            QueryEmbedding::normalized(v)?
        }
        None => p.embed_query(&q.text).await?,
    };
    p.run(&embedding, Some(&q.text), mode, None).await
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let gt = read_ground_truth(open(&a.gt)?).map_err(CliError::in_file(&a.gt))?;
    validate_ground_truth(&gt, &index).map_err(CliError::in_file(&a.gt))?;

    let (results, fallback_grounded, failed_scored) = if let Some(path) = &a.results {
        (
            read_results(open(path)?).map_err(CliError::in_file(path))?,
            0,
            0,
        )
    } else {
        let path = a
            .queries
            .as_ref()
            .expect("clap requires --queries without --results");
        let queries = read_queries(path)?;
        if a.backends.embedder.is_none() {
            if let Some(q) = queries.iter().find(|q| q.embedding.is_none()) {
                return Err(CliError::user(format!(
                    "query {:?} has no embedding and no --embedder is configured",
                    q.query_id
                )));
            }
        }
        let depth = RANK_CUTOFF;
        let (p, mode) = pipeline(index, &a.backends, a.nc, a.nk)?;
        let concurrency = a.backends.max_in_flight.max(1);
        let outcomes: Vec<(String, matir_core::Result<SearchOutcome>)> = runtime()?.block_on(
            stream::iter(&queries)
                .map(|q| {
                    let p = &p;
                    async move {
                        let r = run_query(p, q, mode).await;
                        match &r {
                            Ok(o) => eprintln!(
                                "{}: {} results, {} scorer failures, {} stage-1 masks",
                                q.query_id,
                                o.hits.len(),
                                o.scorer_failures(),
                                o.grounding_fallbacks()
                            ),
                            Err(e) => eprintln!("{}: {e}", q.query_id),
                        }
                        (q.query_id.clone(), r)
                    }
                })
                .buffered(concurrency)
                .collect(),
        );
        let (mut results, mut fallbacks, mut failures) = (Vec::new(), 0, 0);
        for (query_id, outcome) in outcomes {
            let o = outcome.map_err(|e| match CliError::from(e) {
                CliError::User(m) => CliError::User(format!("query {query_id:?}: {m}")),
                other => other,
            })?;
            fallbacks += o.grounding_fallbacks();
            failures += o.scorer_failures();
            results.push(QueryRanking {
                query_id,
                ranking: o.evaluation_ranking(p.index(), depth),
            });
        }
        (results, fallbacks, failures)
    };

    if let Some(path) = &a.dump_results {
        let mut w = create(path)?;
        write_results(&results, &mut w)?;
        w.flush().map_err(|e| CliError::file(path, e))?;
    }
    let mut report = metrics::evaluate(&results, &gt, RANK_CUTOFF)?;
    report.fallback_grounded = fallback_grounded;
    report.failed_scored = failed_scored;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, &report)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            writeln!(w)
                .and_then(|_| w.flush())
                .map_err(|e| CliError::file(path, e))?;
            eprintln!(
                "mAP@50 {:.4}  mAP@50@50 {:.4}  ({} queries evaluated, {} excluded)",
                report.map_50,
                report.map_50_50,
                report.evaluated_queries,
                report.excluded_queries.len()
            );
            Ok(())
        }
        None => print_json(&report),
    }
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => ServiceConfig::from_file(path).map_err(|e| CliError::user(e.to_string()))?,
        None => ServiceConfig::default(),
    }
    .with_process_env();
    if let Some(index) = &a.index {
        config.index_path = Some(index.clone());
    }
    if let Some(listen) = &a.listen {
        config.listen_address = listen.clone();
    }
    config
        .validate()
        .map_err(|e| CliError::user(e.to_string()))?;
    let state = matir_server::build_state(&config).map_err(CliError::user)?;
    runtime()?
        .block_on(matir_server::serve(state, &config.listen_address))
        .map_err(|e| CliError::user(format!("{}: {e}", config.listen_address)))
}

#[derive(Serialize)]
struct RegionView {
    mask_id: u64,
    bbox: matir_core::BoundingBox,
    area: u64,
    embedding_row: usize,
}

#[derive(Serialize)]
struct ImageView<'a> {
    image_id: &'a str,
    width: u32,
    height: u32,
    uri: Option<&'a str>,
    regions: Vec<RegionView>,
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let Some(id) = &a.image else {
        return print_stats(&index, a.json);
    };
    let entry = index
        .image(id)
        .ok_or_else(|| CliError::user(format!("unknown image {id:?}")))?;
    let view = ImageView {
        image_id: &entry.image_id,
        width: entry.width,
        height: entry.height,
        uri: entry.uri.as_deref(),
        regions: entry
            .regions
            .iter()
            .map(|r| RegionView {
                mask_id: r.mask_id,
                bbox: r.bbox,
                area: r.mask.area(),
                embedding_row: r.embedding_row,
            })
            .collect(),
    };
    if a.json {
        return print_json(&view);
    }
    println!(
        "{} ({}x{}) {}",
        view.image_id,
        view.width,
        view.height,
        view.uri.unwrap_or("")
    );
    println!(
        "{:>8}  {:>28}  {:>8}  {:>8}",
        "mask_id", "bbox [x, y, w, h]", "area", "row"
    );
    for r in &view.regions {
        let b = format!("[{}, {}, {}, {}]", r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h);
        println!(
            "{:>8}  {:>28}  {:>8}  {:>8}",
            r.mask_id, b, r.area, r.embedding_row
        );
    }
    Ok(())
}
