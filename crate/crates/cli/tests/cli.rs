//! End-to-end runs of the `matir` and `matir-mocks` binaries.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use matir_core::metrics::{write_ground_truth, EvalReport};
use matir_core::mock::{make_perfect_backends, MockSpec};
use matir_core::synthetic::{planted_gallery, PlantedGallery};
use matir_core::{index_stats, GalleryIndex, IndexStats, SearchResponse};
use matir_server::{serve_mocks, RunningMocks};
use serde_json::{json, Value};
use tempfile::TempDir;

const MATIR: &str = env!("CARGO_BIN_EXE_matir");
const MOCKS: &str = env!("CARGO_BIN_EXE_matir-mocks");

struct Workspace {
    dir: TempDir,
    planted: PlantedGallery,
}

impl Workspace {
    /// Planted gallery exported as manifest + blob, plus ground truth and queries.
    fn new() -> Self {
        let planted = planted_gallery(50, 10, 32, 71);
        let dir = tempfile::tempdir().unwrap();
        let (mut m, mut b) = (Vec::new(), Vec::new());
        planted.index.export_manifest(&mut m, &mut b).unwrap();
        std::fs::write(dir.path().join("manifest.jsonl"), m).unwrap();
        std::fs::write(dir.path().join("embeddings.f32"), b).unwrap();
        let mut gt = Vec::new();
        write_ground_truth(&planted.ground_truth, &mut gt).unwrap();
        std::fs::write(dir.path().join("gt.jsonl"), gt).unwrap();
        let queries: String = planted
            .ground_truth
            .iter()
            .map(|g| format!("{}\n", json!({"query_id": g.query_id, "text": g.text})))
            .collect();
        std::fs::write(dir.path().join("queries.jsonl"), queries).unwrap();
        let ws = Self { dir, planted };
        let out = ws.matir(&[
            "build-index",
            "--manifest",
            ws.p("manifest.jsonl"),
            "--embeddings",
            ws.p("embeddings.f32"),
            "--dim",
            "32",
            "--out",
            ws.p("gallery.idx"),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> &str {
        // leaked so argument lists can be plain &str slices
        Box::leak(
            self.path(name)
                .to_string_lossy()
                .into_owned()
                .into_boxed_str(),
        )
    }

    fn matir(&self, args: &[&str]) -> Output {
        Command::new(MATIR).args(args).output().unwrap()
    }

    fn write_query(&self, name: &str, rows: &[&[f32]]) -> &str {
        let bytes: Vec<u8> = rows
            .iter()
            .flat_map(|r| r.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        std::fs::write(self.path(name), bytes).unwrap();
        self.p(name)
    }
}

/// Mock servers on a runtime owned by the test.
struct Mocks {
    running: RunningMocks,
    _rt: tokio::runtime::Runtime,
}

impl Mocks {
    fn start(spec: MockSpec) -> Self {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let running = rt.block_on(serve_mocks(spec, "127.0.0.1:0")).unwrap();
        Self { running, _rt: rt }
    }

    fn perfect(p: &PlantedGallery) -> Self {
        Self::start(make_perfect_backends(
            &p.ground_truth,
            &p.index,
            &p.query_vectors,
        ))
    }

    fn url(&self) -> String {
        self.running.url()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn build_index_prints_stats_matching_the_index() {
    let ws = Workspace::new();
    let out = ws.matir(&["inspect", "--index", ws.p("gallery.idx"), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let stats: IndexStats = serde_json::from_slice(&out.stdout).unwrap();
    let loaded = GalleryIndex::load(ws.path("gallery.idx")).unwrap();
    assert_eq!(stats, index_stats(&loaded));
    assert_eq!(stats.images, 50);
    assert_eq!(stats.regions, 150);

    let out = ws.matir(&[
        "build-index",
        "--manifest",
        ws.p("manifest.jsonl"),
        "--embeddings",
        ws.p("embeddings.f32"),
        "--dim",
        "32",
        "--out",
        ws.p("again.idx"),
    ]);
    assert!(stdout(&out).contains("regions     150"), "{}", stdout(&out));
}

#[test]
fn build_index_validation_errors_exit_2() {
    let ws = Workspace::new();
    let blob = std::fs::read(ws.path("embeddings.f32")).unwrap();
    std::fs::write(ws.path("short.f32"), &blob[..blob.len() - 4]).unwrap();
    let run = |blob: &str, dim: &str| {
        ws.matir(&[
            "build-index",
            "--manifest",
            ws.p("manifest.jsonl"),
            "--embeddings",
            blob,
            "--dim",
            dim,
            "--out",
            ws.p("x.idx"),
        ])
    };
    let out = run(ws.p("short.f32"), "32");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("size mismatch"), "{}", stderr(&out));
    let out = run(ws.p("empty.f32"), "32");
    assert_eq!(out.status.code(), Some(2));
    let out = run(ws.p("embeddings.f32"), "16");
    assert_eq!(out.status.code(), Some(2));

    let mut manifest = std::fs::read_to_string(ws.path("manifest.jsonl")).unwrap();
    manifest.push_str("{\"image_id\": \"broken\"\n");
    std::fs::write(ws.path("bad.jsonl"), manifest).unwrap();
    let out = ws.matir(&[
        "build-index",
        "--manifest",
        ws.p("bad.jsonl"),
        "--embeddings",
        ws.p("embeddings.f32"),
        "--dim",
        "32",
        "--out",
        ws.p("x.idx"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 151"), "{}", stderr(&out));
    assert!(!ws.path("x.idx").exists());
}

#[test]
fn stage1_search_puts_planted_image_first() {
    let ws = Workspace::new();
    for gt in &ws.planted.ground_truth {
        let q = ws.write_query("q.f32", &[&ws.planted.query_vectors[&gt.text]]);
        let out = ws.matir(&[
            "search",
            "--index",
            ws.p("gallery.idx"),
            "--query-embedding",
            q,
            "--nk",
            "5",
            "--json",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let r: SearchResponse = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(r.results.len(), 5);
        assert!(gt.relevant.contains_key(&r.results[0].image_id));
    }
    let q = ws.write_query("q.f32", &[&ws.planted.query_vectors["object 0"]]);
    let out = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        q,
    ]);
    let table = stdout(&out);
    assert!(table.starts_with("rank"));
    assert!(table.contains("stage1-fallback"));
}

#[test]
fn several_rows_are_ensembled() {
    let ws = Workspace::new();
    let a = &ws.planted.query_vectors["object 1"];
    let half: Vec<f32> = a.iter().map(|v| v * 0.5).collect();
    let one = ws.write_query("one.f32", &[a]);
    let out1 = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        one,
        "--json",
    ]);
    let two = ws.write_query("two.f32", &[a, &half]);
    let out2 = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        two,
        "--json",
    ]);
    let ids = |o: &Output| {
        let r: SearchResponse = serde_json::from_slice(&o.stdout).unwrap();
        r.results
            .into_iter()
            .map(|h| h.image_id)
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(&out1), ids(&out2));
    let bad = ws.write_query("bad.f32", &[&a[..31]]);
    let out = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        bad,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn search_with_backends_grounds_results() {
    let ws = Workspace::new();
    let mocks = Mocks::perfect(&ws.planted);
    let gt = &ws.planted.ground_truth[2];
    let q = ws.write_query("q.f32", &[&ws.planted.query_vectors[&gt.text]]);
    let url = mocks.url();
    let out = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        q,
        "--query-text",
        &gt.text,
        "--scorer",
        &url,
        "--grounder",
        &url,
        "--nk",
        "10",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["mode"], "full");
    let results = r["results"].as_array().unwrap();
    assert_eq!(results.len(), 10);
    for hit in &results[..gt.relevant.len()] {
        assert_eq!(hit["source"], "grounder-matched");
        assert_eq!(hit["matched_iou"], 1.0);
    }

    let out = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        q,
        "--scorer",
        &url,
    ]);
    assert_eq!(out.status.code(), Some(2), "query text is required");
    let out = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        q,
        "--grounder",
        &url,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nk_above_nc_is_a_user_error() {
    let ws = Workspace::new();
    let q = ws.write_query("q.f32", &[&ws.planted.query_vectors["object 0"]]);
    let out = ws.matir(&[
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        q,
        "--nc",
        "10",
        "--nk",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_k <= n_c"), "{}", stderr(&out));
    assert_eq!(
        ws.matir(&["search", "--index", ws.p("gallery.idx"), "--bogus"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn scorer_outage_exits_3_under_fail_policy() {
    let ws = Workspace::new();
    let q = ws.write_query("q.f32", &[&ws.planted.query_vectors["object 0"]]);
    let down = format!("http://127.0.0.1:{}", free_port());
    let args = [
        "search",
        "--index",
        ws.p("gallery.idx"),
        "--query-embedding",
        q,
        "--query-text",
        "object 0",
        "--scorer",
        &down,
        "--retries",
        "0",
        "--json",
    ];
    let out = ws.matir(&args);
    assert_eq!(out.status.code(), Some(0), "degrades by default");
    let r: SearchResponse = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r.results.iter().all(|h| h.scorer_failed));
    let mut strict = args.to_vec();
    strict.push("--fail-on-outage");
    assert_eq!(ws.matir(&strict).status.code(), Some(3));
}

fn evaluate(ws: &Workspace, mocks: &Mocks, out_name: &str, extra: &[&str]) -> EvalReport {
    let url = mocks.url();
    let mut args = vec![
        "evaluate",
        "--index",
        ws.p("gallery.idx"),
        "--gt",
        ws.p("gt.jsonl"),
        "--queries",
        ws.p("queries.jsonl"),
        "--embedder",
        &url,
        "--scorer",
        &url,
        "--grounder",
        &url,
        "--out",
        ws.p(out_name),
    ];
    args.extend_from_slice(extra);
    let out = ws.matir(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        stderr(&out).lines().filter(|l| l.starts_with('q')).count(),
        10
    );
    serde_json::from_str(&std::fs::read_to_string(ws.path(out_name)).unwrap()).unwrap()
}

#[test]
fn perfect_backends_evaluate_to_one() {
    let ws = Workspace::new();
    let mocks = Mocks::perfect(&ws.planted);
    let report = evaluate(
        &ws,
        &mocks,
        "report.json",
        &["--dump-results", ws.p("results.jsonl")],
    );
    assert_eq!((report.map_50, report.map_50_50), (1.0, 1.0));
    assert_eq!(report.evaluated_queries, 10);

    // offline scoring of the dumped rankings gives the same numbers
    let out = ws.matir(&[
        "evaluate",
        "--index",
        ws.p("gallery.idx"),
        "--gt",
        ws.p("gt.jsonl"),
        "--results",
        ws.p("results.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let offline: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((offline.map_50, offline.map_50_50), (1.0, 1.0));
    assert_eq!(offline.per_query, report.per_query);
}

#[test]
fn adversarial_grounder_drops_only_the_object_metric() {
    let ws = Workspace::new();
    let p = &ws.planted;
    let mut spec = make_perfect_backends(&p.ground_truth, &p.index, &p.query_vectors);
    for gt in &p.ground_truth {
        let boxes = spec.grounder.boxes.get_mut(&gt.text).unwrap();
        for (id, masks) in &gt.relevant {
            let entry = p.index.image(id).unwrap();
            let wrong = entry.regions.iter().find(|r| r.mask != masks[0]).unwrap();
            let b = wrong.bbox;
            boxes.insert(
                entry.backend_uri().to_owned(),
                vec![[b.x, b.y, b.x2(), b.y2()]],
            );
        }
    }
    let mocks = Mocks::start(spec);
    let report = evaluate(&ws, &mocks, "adv.json", &[]);
    assert_eq!(report.map_50, 1.0);
    assert!(report.map_50_50 < 1.0, "{}", report.map_50_50);
    assert_eq!(report.map_50_50, 0.0);
}

#[test]
fn malformed_ground_truth_reports_the_line() {
    let ws = Workspace::new();
    let mut gt = std::fs::read_to_string(ws.path("gt.jsonl")).unwrap();
    let second = gt.lines().nth(1).unwrap().to_owned();
    gt = gt.replacen(&second, "{\"query_id\": \"q01\", \"text\": ", 1);
    std::fs::write(ws.path("bad_gt.jsonl"), gt).unwrap();
    let out = ws.matir(&[
        "evaluate",
        "--index",
        ws.p("gallery.idx"),
        "--gt",
        ws.p("bad_gt.jsonl"),
        "--queries",
        ws.p("queries.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let out = ws.matir(&[
        "evaluate",
        "--index",
        ws.p("gallery.idx"),
        "--gt",
        ws.p("gt.jsonl"),
        "--queries",
        ws.p("queries.jsonl"),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "queries without embeddings need an embedder"
    );
}

#[test]
fn inspect_lists_regions_and_rejects_unknown_images() {
    let ws = Workspace::new();
    let out = ws.matir(&[
        "inspect",
        "--index",
        ws.p("gallery.idx"),
        "--image",
        "img_0007",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.starts_with("img_0007 (32x32) mem://img_0007"));
    assert_eq!(text.lines().count(), 2 + 3);
    let out = ws.matir(&[
        "inspect",
        "--index",
        ws.p("gallery.idx"),
        "--image",
        "img_0007",
        "--json",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let ids: Vec<u64> = v["regions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mask_id"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, [1, 2, 3]);
    assert_eq!(v["regions"][0]["area"], 120);
    let out = ws.matir(&["inspect", "--index", ws.p("gallery.idx"), "--image", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ws.matir(&["inspect", "--index", ws.p("missing.idx")]);
    assert_eq!(out.status.code(), Some(2));
}

struct Child(std::process::Child);

impl Drop for Child {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Blocking HTTP helpers on a throwaway runtime.
mod http {
    pub use self::inner::*;

    mod inner {
        pub struct Response {
            pub status: u16,
            pub body: serde_json::Value,
        }

        fn rt() -> tokio::runtime::Runtime {
            tokio::runtime::Runtime::new().unwrap()
        }

        pub fn get(url: &str) -> Response {
            rt().block_on(async {
                let deadline = std::time::Instant::now() + std::time::Duration::from_secs(20);
                loop {
                    match ::reqwest::get(url).await {
                        Ok(r) => {
                            let status = r.status().as_u16();
                            return Response {
                                status,
                                body: r.json().await.unwrap(),
                            };
                        }
                        Err(e) if std::time::Instant::now() > deadline => panic!("{url}: {e}"),
                        Err(_) => tokio::time::sleep(std::time::Duration::from_millis(50)).await,
                    }
                }
            })
        }

        pub fn post(url: &str, body: &serde_json::Value) -> Response {
            rt().block_on(async {
                let r = ::reqwest::Client::new()
                    .post(url)
                    .json(body)
                    .send()
                    .await
                    .unwrap();
                let status = r.status().as_u16();
                Response {
                    status,
                    body: r.json().await.unwrap(),
                }
            })
        }
    }
}

fn spawn_serve(ws: &Workspace, mocks: &Mocks, port: u16) -> Child {
    let url = mocks.url();
    let config = json!({
        "index_path": "/does/not/exist.idx",
        "text_embedder_url": url,
        "scorer_url": url,
        "grounder_url": url,
        "listen_address": "127.0.0.1:1",
    });
    std::fs::write(ws.path("service.json"), config.to_string()).unwrap();
    // the environment overrides both file values
    Child(
        Command::new(MATIR)
            .args(["serve", "--config", ws.p("service.json")])
            .env("MATIR_INDEX", ws.path("gallery.idx"))
            .env("MATIR_LISTEN", format!("127.0.0.1:{port}"))
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    )
}

#[test]
fn cli_search_matches_service_search_embedding() {
    let ws = Workspace::new();
    let mocks = Mocks::perfect(&ws.planted);
    let port = free_port();
    let _server = spawn_serve(&ws, &mocks, port);
    let health = http::get(&format!("http://127.0.0.1:{port}/v1/health"));
    assert_eq!(health.status, 200);
    assert_eq!(health.body["status"], "ok");

    let url = mocks.url();
    for gt in ws.planted.ground_truth.iter().take(3) {
        let v = &ws.planted.query_vectors[&gt.text];
        let q = ws.write_query("q.f32", &[v]);
        let cli = ws.matir(&[
            "search",
            "--index",
            ws.p("gallery.idx"),
            "--query-embedding",
            q,
            "--query-text",
            &gt.text,
            "--embedder",
            &url,
            "--scorer",
            &url,
            "--grounder",
            &url,
            "--json",
        ]);
        assert_eq!(cli.status.code(), Some(0), "{}", stderr(&cli));
        let cli: Value = serde_json::from_slice(&cli.stdout).unwrap();
        let service = http::post(
            &format!("http://127.0.0.1:{port}/v1/search_embedding"),
            &json!({"embedding": v, "query_text": gt.text}),
        );
        assert_eq!(service.status, 200);
        assert_eq!(cli, service.body);

        let cli = ws.matir(&[
            "search",
            "--index",
            ws.p("gallery.idx"),
            "--query-embedding",
            q,
            "--json",
        ]);
        let cli: Value = serde_json::from_slice(&cli.stdout).unwrap();
        let service = http::post(
            &format!("http://127.0.0.1:{port}/v1/search_embedding"),
            &json!({"embedding": v, "mode": "stage1"}),
        );
        assert_eq!(cli, service.body);
    }
}

#[test]
fn mocks_binary_serves_a_spec_file() {
    let ws = Workspace::new();
    let spec = make_perfect_backends(
        &ws.planted.ground_truth,
        &ws.planted.index,
        &ws.planted.query_vectors,
    );
    std::fs::write(ws.path("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let mut child = Child(
        Command::new(MOCKS)
            .args(["--spec", ws.p("spec.json"), "--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let mut line = String::new();
    BufReader::new(child.0.stdout.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    let base = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_owned();
    let gt = &ws.planted.ground_truth[0];
    let image = gt.relevant.keys().next().unwrap();
    let r = http::post(
        &format!("{base}/v1/score"),
        &json!({"image_uri": format!("mem://{image}"), "object_text": gt.text}),
    );
    assert_eq!(r.body, json!({"z_true": 10.0, "z_false": -10.0}));

    std::fs::write(ws.path("broken.json"), "{").unwrap();
    let out = Command::new(MOCKS)
        .args(["--spec", ws.p("broken.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
