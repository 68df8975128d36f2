use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use pipetwin_core::model::MODEL_SCHEMA;
use pipetwin_testkit::forge::{sha, BackgroundForge};
use pipetwin_testkit::{fixtures, gen, runs};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pipetwin"));
    c.env_remove("PIPETWIN_TOKEN");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> String {
    fixtures::path(name).to_string_lossy().into_owned()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn transform_reproduces_golden_document() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("java_app.bpmn");
    let o = run(&["transform", &fixture("java_app.yml"), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(o.stdout.is_empty());
    assert_eq!(std::fs::read(&out).unwrap(), fixtures::read("java_app.bpmn"));
}

#[test]
fn transform_is_deterministic_across_runs_and_orderings() {
    let first = run(&["transform", &fixture("java_app.yml")]).stdout;
    for _ in 0..2 {
        assert_eq!(run(&["transform", &fixture("java_app.yml")]).stdout, first);
    }
    let dir = tempfile::tempdir().unwrap();
    let mut rng = gen::seeded(11);
    for i in 0..4 {
        let p = gen::random_pipeline(&mut rng, 6);
        let a = dir.path().join(format!("a{i}.yml"));
        let b = dir.path().join(format!("b{i}.yml"));
        std::fs::write(&a, gen::to_yaml(&p)).unwrap();
        let reversed: Vec<usize> = (0..p.jobs.len()).rev().collect();
        std::fs::write(&b, gen::to_yaml_ordered(&p, &reversed)).unwrap();
        let (xa, xb) = (
            run(&["transform", a.to_str().unwrap()]),
            run(&["transform", b.to_str().unwrap()]),
        );
        assert_eq!(xa.status.code(), Some(0));
        assert_eq!(xa.stdout, xb.stdout);
    }
}

#[test]
fn validate_only_reports_zero_violations() {
    let o = run(&["transform", &fixture("java_app.yml"), "--validate-only"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(text(&o.stdout), "0 violations\n");
}

#[test]
fn needs_cycle_fails_and_names_the_jobs() {
    let o = run(&["transform", &fixture("invalid/needs_cycle.yml")]);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    assert!(
        err.contains("cycle") && err.contains("build-a") && err.contains("build-b"),
        "{err}"
    );
    assert!(o.stdout.is_empty());
    let o = run(&["transform", &fixture("invalid/needs_cycle.yml"), "--validate-only"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn json_model_goes_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bpmn");
    let o = run(&[
        "transform",
        &fixture("java_app.yml"),
        "-o",
        out.to_str().unwrap(),
        "--json-model",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema"], MODEL_SCHEMA);
    assert_eq!(v["pipeline"]["jobs"].as_array().unwrap().len(), 5);
    assert!(out.exists());
}

#[test]
fn io_failures_exit_two() {
    assert_eq!(run(&["transform", "/nonexistent/ci.yml"]).status.code(), Some(2));
    let o = run(&["transform", &fixture("java_app.yml"), "-o", "/nonexistent/dir/out.bpmn"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        run(&["diff", &fixture("java_app.yml"), "/nonexistent.yml"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn diff_exit_codes() {
    let o = run(&["diff", &fixture("java_app.yml"), &fixture("java_app.yml")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stdout).contains("0 added, 0 removed, 0 modified"));

    let o = run(&["diff", &fixture("inkscape_v1.yml"), &fixture("inkscape_v2.yml")]);
    assert_eq!(o.status.code(), Some(3));
    let out = text(&o.stdout);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[1] == "jobs 15 → 17 (+2)", "{out}");
    assert_eq!(lines[2], "2 added, 0 removed, 1 modified");
    assert!(out.contains("~ job inkscape:macos ("));

    let o = run(&["diff", &fixture("java_app.yml"), &fixture("invalid/malformed.yml")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("malformed.yml"));
}

#[test]
fn diff_json_is_the_diff_document() {
    let o = run(&[
        "diff",
        &fixture("inkscape_v1.yml"),
        &fixture("inkscape_v2.yml"),
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let d: pipetwin_core::StructuralDiff = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(d.schema, "pipetwin.diff/1");
    assert_eq!(d.summary.jobs_delta, 2);
}

fn ingest(forge: &BackgroundForge, store: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "ingest",
        "--url",
        &forge.forge.api_root(),
        "--project",
        "group/app",
        "--store",
        store.to_str().unwrap(),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    bin().args(&args).output().unwrap()
}

#[test]
fn ingest_fills_the_store() {
    let forge = BackgroundForge::start();
    forge.forge.seed_inkscape();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.json");
    let o = ingest(&forge, &store, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(
        text(&o.stdout).starts_with("group/app: 2 commits, 2 versions (2 new), 116 runs"),
        "{}",
        text(&o.stdout)
    );
    let s = pipetwin_twin::Store::open(&store).unwrap();
    assert_eq!(s.versions("group/app").unwrap().len(), 2);
    assert_eq!(s.runs("group/app").unwrap().len(), 116);

    let o = ingest(&forge, &store, &["--limit", "1"]);
    assert!(
        text(&o.stdout).starts_with("group/app: 1 commits, 1 versions (0 new)"),
        "{}",
        text(&o.stdout)
    );
    assert!(forge.forge.write_requests().is_empty());
}

#[test]
fn ingest_reads_token_from_environment() {
    let forge = BackgroundForge::start();
    forge.forge.seed_inkscape();
    forge.forge.set_token("glpat-good");
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.json");

    let o = ingest(&forge, &store, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("401"), "{}", text(&o.stderr));

    let mut args = vec!["ingest", "--url"];
    let root = forge.forge.api_root();
    args.extend([
        root.as_str(),
        "--project",
        "group/app",
        "--store",
        store.to_str().unwrap(),
    ]);
    let o = bin().args(&args).env("PIPETWIN_TOKEN", "glpat-good").output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(!std::fs::read_to_string(&store).unwrap().contains("glpat-good"));
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(store: &Path) -> Server {
    let mut child = bin()
        .args(["serve", "--port", "0", "--store", store.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .strip_prefix("listening on ")
        .and_then(|r| r.split_whitespace().next())
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    Server(child, addr)
}

fn http_get(url: &str) -> (u16, String, Vec<u8>) {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(async {
        let r = reqwest::get(url).await.unwrap();
        let status = r.status().as_u16();
        let ct = r
            .headers()
            .get("content-type")
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default();
        (status, ct, r.bytes().await.unwrap().to_vec())
    })
}

#[test]
fn served_bpmn_matches_transform_output() {
    let forge = BackgroundForge::start();
    forge
        .forge
        .push_commit(&sha(1), runs::epoch(), &fixtures::read("java_app.yml"));
    let dir = tempfile::tempdir().unwrap();
    let store: PathBuf = dir.path().join("store.json");
    assert_eq!(ingest(&forge, &store, &[]).status.code(), Some(0));

    let server = serve(&store);
    let base = format!("{}/api/v1", server.1);
    let (status, _, body) = http_get(&format!("{base}/health"));
    assert_eq!(status, 200);
    let health: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(health["twin"]["projects"], serde_json::json!(["group/app"]));

    let hash = fixtures::pipeline("java_app.yml").yaml_hash;
    let (status, ct, served) = http_get(&format!("{base}/projects/group%2Fapp/versions/{hash}/bpmn"));
    assert_eq!((status, ct.as_str()), (200, "application/xml"));
    let local = run(&["transform", &fixture("java_app.yml")]).stdout;
    assert_eq!(served, local);

    let (status, ct, body) = http_get(&format!("{base}/projects/group%2Fapp/versions/{}/bpmn", "0".repeat(64)));
    assert_eq!(status, 404);
    assert!(ct.starts_with("application/json"));
    let e: pipetwin_twin::api::ApiError = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.code, "unknown_version");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["transform"]).status.code(), Some(2));
    assert_eq!(
        run(&["transform", "x.yml", "--validate-only", "-o", "y"]).status.code(),
        Some(2)
    );
}
