use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use pipetwin_core::analytics::ExecutionOverlay;
use pipetwin_core::parser::{Provenance, RawConfig};
use pipetwin_testkit::forge::{sha, MockForge};
use pipetwin_testkit::{fixtures, runs};
use pipetwin_twin::api::{router, ApiError, AppState};
use pipetwin_twin::{Bus, ConfigSnapshot, Store, Twin};
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

const ID: &str = "group%2Fapp";

struct Reply {
    status: StatusCode,
    content_type: String,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    fn error(&self) -> ApiError {
        let e: ApiError = serde_json::from_slice(&self.body).expect("error body has the ApiError shape");
        assert_eq!(e.status, self.status.as_u16());
        e
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply {
        status,
        content_type,
        body,
    }
}

async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None).await
}

struct Fixture {
    forge: MockForge,
    twin: Arc<Twin>,
    app: Router,
    h1: String,
    h2: String,
}

/// A twin with the inkscape-shaped project registered and synced over HTTP.
async fn synced() -> Fixture {
    let forge = MockForge::start().await;
    let (h1, h2) = forge.seed_inkscape();
    let twin = Twin::start(Arc::new(Store::in_memory()), Bus::new(16)).await;
    let app = router(AppState::new(twin.clone()));
    let r = call(
        &app,
        Method::POST,
        "/api/v1/projects",
        Some(json!({"base_url": forge.api_root(), "project_id": "group/app"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.body));
    let r = call(&app, Method::POST, &format!("/api/v1/projects/{ID}/sync"), None).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    Fixture {
        forge,
        twin,
        app,
        h1,
        h2,
    }
}

fn snapshot(name: &str, commit: u64) -> ConfigSnapshot {
    ConfigSnapshot {
        raw: RawConfig {
            raw_bytes: fixtures::read(name),
            provenance: Provenance {
                git_ref: "main".into(),
                commit_sha: sha(commit),
                file_path: ".gitlab-ci.yml".into(),
            },
        },
        fetched_at: runs::epoch(),
        committed_at: runs::epoch(),
    }
}

#[tokio::test]
async fn health_reports_build_and_twin_status() {
    let f = synced().await;
    let r = get(&f.app, "/api/v1/health").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["build"]["name"], "pipetwin");
    assert_eq!(v["build"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["twin"]["generations"], 2);
    assert_eq!(v["twin"]["projects"], json!(["group/app"]));
}

#[tokio::test]
async fn registration_and_listing() {
    let f = synced().await;
    let r = get(&f.app, "/api/v1/projects").await;
    let v = r.json();
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["project_id"], "group/app");
    assert_eq!(v[0]["ci_file_path"], ".gitlab-ci.yml");

    let r = call(
        &f.app,
        Method::POST,
        "/api/v1/projects",
        Some(json!({"base_url": "https://gitlab.example.com/api/v4", "project_id": 7, "ref": "release", "token": "hidden-token"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED);
    let v = r.json();
    assert_eq!(v["project_id"], "7");
    assert_eq!(v["ref"], "release");
    assert!(!String::from_utf8_lossy(&r.body).contains("hidden-token"));
    assert!(!String::from_utf8_lossy(&f.twin.store().to_bytes()).contains("hidden-token"));
}

#[tokio::test]
async fn versions_list_provenance() {
    let f = synced().await;
    let v = get(&f.app, &format!("/api/v1/projects/{ID}/versions")).await.json();
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["yaml_hash"], f.h1.as_str());
    assert_eq!(list[0]["commit_sha"], sha(1));
    assert_eq!(list[0]["ref"], "main");
    assert_eq!(list[0]["job_count"], 15);
    assert_eq!(list[1]["yaml_hash"], f.h2.as_str());
    assert_eq!(list[1]["job_count"], 17);
    assert!(list[0]["first_seen"].as_str().unwrap().ends_with('Z'));
}

#[tokio::test]
async fn bpmn_is_the_stored_document() {
    let f = synced().await;
    let r = get(&f.app, &format!("/api/v1/projects/{ID}/versions/{}/bpmn", f.h1)).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "application/xml");
    let stored = f.twin.store().bpmn("group/app", &f.h1).unwrap();
    assert_eq!(r.body, stored.xml.as_bytes());
    let direct = pipetwin_core::generate(&fixtures::pipeline("inkscape_v1.yml")).unwrap();
    assert_eq!(r.body, direct.xml.as_bytes());
}

#[tokio::test]
async fn model_and_metrics_documents() {
    let f = synced().await;
    let m = get(&f.app, &format!("/api/v1/projects/{ID}/versions/{}/model", f.h2))
        .await
        .json();
    assert_eq!(m["schema"], pipetwin_core::model::MODEL_SCHEMA);
    assert_eq!(m["pipeline"]["yaml_hash"], f.h2.as_str());

    let m = get(&f.app, &format!("/api/v1/projects/{ID}/versions/{}/metrics", f.h1))
        .await
        .json();
    assert_eq!(m["runs"], 16);
    assert_eq!(m["success_rate_pct"], 31.2);
    let m = get(&f.app, &format!("/api/v1/projects/{ID}/versions/{}/metrics", f.h2))
        .await
        .json();
    assert_eq!(m["runs"], 100);
    assert_eq!(m["success_rate_pct"], 61.0);
    assert_eq!(
        m["failure_categories"],
        json!({"script": 19, "infrastructure": 2, "other": 0})
    );
}

#[tokio::test]
async fn metrics_delta_over_inkscape_versions() {
    let f = synced().await;
    let r = get(
        &f.app,
        &format!("/api/v1/projects/{ID}/metrics/delta?from={}&to={}", f.h1, f.h2),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["from_hash"], f.h1.as_str());
    let rows = v["rows"].as_array().unwrap();
    let display = |metric: &str| {
        rows.iter()
            .find(|r| r["metric"] == metric)
            .unwrap_or_else(|| panic!("no row {metric}"))["display"]
            .as_str()
            .unwrap()
            .to_string()
    };
    assert_eq!(display("jobs"), "+2");
    assert_eq!(display("success_rate_pct"), "+29.8 pp");
    assert!(rows.iter().any(|r| r["display"] == "-26.2%"), "{rows:?}");
}

#[tokio::test]
async fn diff_identity_and_versions() {
    let f = synced().await;
    let v = get(&f.app, &format!("/api/v1/projects/{ID}/diff?from={0}&to={0}", f.h1))
        .await
        .json();
    for k in [
        "added_jobs",
        "removed_jobs",
        "modified_jobs",
        "added_templates",
        "removed_templates",
    ] {
        assert_eq!(v[k], json!([]), "{k}");
    }
    assert!(v["overlays"]["from"]["elements"].as_object().unwrap().is_empty());

    let v = get(&f.app, &format!("/api/v1/projects/{ID}/diff?from={}&to={}", f.h1, f.h2))
        .await
        .json();
    assert_eq!(v["schema"], "pipetwin.diff/1");
    assert_eq!(v["added_jobs"].as_array().unwrap().len(), 2);
    assert_eq!(v["modified_jobs"].as_array().unwrap().len(), 1);
    assert_eq!(v["added_templates"].as_array().unwrap().len(), 1);
    assert_eq!(v["overlays"]["to"]["yaml_hash"], f.h2.as_str());
    let added = v["overlays"]["to"]["elements"]
        .as_object()
        .unwrap()
        .values()
        .filter(|k| *k == "added")
        .count();
    assert_eq!(added, 2);
}

#[tokio::test]
async fn runs_and_overlays() {
    let f = synced().await;
    let all = get(&f.app, &format!("/api/v1/projects/{ID}/runs")).await.json();
    assert_eq!(all.as_array().unwrap().len(), 116);
    let v1 = get(&f.app, &format!("/api/v1/projects/{ID}/runs?hash={}", f.h1))
        .await
        .json();
    let v1 = v1.as_array().unwrap();
    assert_eq!(v1.len(), 16);
    assert!(v1.iter().all(|r| r["pipeline_yaml_hash"] == f.h1.as_str()));

    let r = get(&f.app, &format!("/api/v1/projects/{ID}/runs/1000/overlay")).await;
    assert_eq!(r.status, StatusCode::OK);
    let o: ExecutionOverlay = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(o.run_id, 1000);
    assert_eq!(o.yaml_hash, f.h1);
    let doc = f.twin.store().bpmn("group/app", &f.h1).unwrap();
    assert!(o.elements.keys().all(|id| doc.element_index.values().any(|v| v == id)));
    assert!(!o.elements.is_empty());
}

#[tokio::test]
async fn error_statuses_and_codes() {
    let f = synced().await;
    let unknown = "f".repeat(64);
    let cases = [
        ("/api/v1/projects/nope/versions".to_string(), 404, "unknown_project"),
        (
            format!("/api/v1/projects/{ID}/versions/{unknown}/bpmn"),
            404,
            "unknown_version",
        ),
        (
            format!("/api/v1/projects/{ID}/versions/{}/bpmn", &f.h1[..12]),
            422,
            "invalid_query",
        ),
        (
            format!("/api/v1/projects/{ID}/versions/{}/model", f.h1.to_uppercase()),
            422,
            "invalid_query",
        ),
        (
            format!("/api/v1/projects/{ID}/diff?from={}", f.h1),
            422,
            "invalid_query",
        ),
        (
            format!("/api/v1/projects/{ID}/diff?from={}&to=zz", f.h1),
            422,
            "invalid_query",
        ),
        (
            format!("/api/v1/projects/{ID}/metrics/delta?from={}&to={unknown}", f.h1),
            404,
            "unknown_version",
        ),
        (format!("/api/v1/projects/{ID}/runs?hash=abc"), 422, "invalid_query"),
        (format!("/api/v1/projects/{ID}/runs/1/overlay"), 404, "unknown_run"),
        (format!("/api/v1/projects/{ID}/runs/x/overlay"), 422, "invalid_query"),
        ("/api/v1/nothing".to_string(), 404, "not_found"),
        ("/elsewhere".to_string(), 404, "not_found"),
    ];
    for (uri, status, code) in cases {
        let r = get(&f.app, &uri).await;
        assert_eq!(r.status.as_u16(), status, "{uri}");
        assert_eq!(r.error().code, code, "{uri}");
    }
    let r = call(&f.app, Method::DELETE, &format!("/api/v1/projects/{ID}/versions"), None).await;
    assert_eq!(r.status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(r.error().code, "method_not_allowed");
    let r = call(&f.app, Method::POST, "/api/v1/projects", Some(json!({"base_url": 1}))).await;
    assert_eq!(r.error().code, "invalid_body");
    let r = call(
        &f.app,
        Method::POST,
        "/api/v1/projects",
        Some(json!({"base_url": "ftp://x", "project_id": "a"})),
    )
    .await;
    assert_eq!(r.error().code, "invalid_query");
}

#[tokio::test]
async fn versions_of_other_projects_conflict() {
    let f = synced().await;
    let other = snapshot("java_app.yml", 9);
    f.twin.process_snapshot("other", &other).await.unwrap();
    let h = other.yaml_hash();
    let r = get(&f.app, &format!("/api/v1/projects/{ID}/versions/{h}/bpmn")).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.error().code, "cross_project");
    let r = get(&f.app, &format!("/api/v1/projects/{ID}/diff?from={}&to={h}", f.h1)).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn overlay_for_foreign_jobs_is_unprocessable() {
    let f = synced().await;
    let mut run = f.twin.store().run("group/app", 1000).unwrap();
    run.run_id = 77;
    run.job_runs[0].job_name = "ghost".into();
    f.twin.process_runs("group/app", &[run]).unwrap();
    let r = get(&f.app, &format!("/api/v1/projects/{ID}/runs/77/overlay")).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.error().code, "overlay_unavailable");
}

#[tokio::test]
async fn forge_failures_on_sync_are_bad_gateway() {
    let f = synced().await;
    f.forge.inject(503, None, 50);
    let r = call(&f.app, Method::POST, &format!("/api/v1/projects/{ID}/sync"), None).await;
    assert_eq!(r.status, StatusCode::BAD_GATEWAY);
    assert_eq!(r.error().code, "forge_unreachable");

    let f = synced().await;
    f.forge.set_token("right");
    let r = call(&f.app, Method::POST, &format!("/api/v1/projects/{ID}/sync"), None).await;
    assert_eq!(r.error().code, "forge_auth_failed");
    assert_eq!(r.status, StatusCode::BAD_GATEWAY);

    let r = call(&f.app, Method::POST, "/api/v1/projects/nope/sync", None).await;
    assert_eq!(r.error().code, "unknown_project");
}

#[tokio::test]
async fn persisted_project_needs_registration_before_sync() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.json");
    {
        let twin = Twin::start(Arc::new(Store::open(&path).unwrap()), Bus::new(4)).await;
        let app = router(AppState::new(twin));
        let body = json!({"base_url": "https://gitlab.example.com/api/v4", "project_id": "9"});
        assert_eq!(
            call(&app, Method::POST, "/api/v1/projects", Some(body)).await.status,
            StatusCode::CREATED
        );
    }
    let twin = Twin::start(Arc::new(Store::open(&path).unwrap()), Bus::new(4)).await;
    let app = router(AppState::new(twin));
    let r = call(&app, Method::POST, "/api/v1/projects/9/sync", None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.error().code, "not_registered");
    assert_eq!(get(&app, "/api/v1/projects/9/versions").await.json(), json!([]));
}

#[tokio::test]
async fn responses_are_deterministic() {
    let f = synced().await;
    let uris = [
        format!("/api/v1/projects/{ID}/versions"),
        format!("/api/v1/projects/{ID}/versions/{}/bpmn", f.h2),
        format!("/api/v1/projects/{ID}/versions/{}/metrics", f.h2),
        format!("/api/v1/projects/{ID}/diff?from={}&to={}", f.h1, f.h2),
        format!("/api/v1/projects/{ID}/runs?hash={}", f.h2),
    ];
    for uri in uris {
        let a = get(&f.app, &uri).await.body;
        let b = get(&f.app, &uri).await.body;
        assert_eq!(a, b, "{uri}");
    }
}

#[tokio::test]
async fn api_never_writes_to_the_forge() {
    let f = synced().await;
    for uri in [
        format!("/api/v1/projects/{ID}/versions"),
        format!("/api/v1/projects/{ID}/diff?from={}&to={}", f.h1, f.h2),
        format!("/api/v1/projects/{ID}/runs/2000/overlay"),
    ] {
        get(&f.app, &uri).await;
    }
    for m in [Method::PUT, Method::DELETE, Method::PATCH] {
        call(&f.app, m, &format!("/api/v1/projects/{ID}/versions"), Some(json!({}))).await;
    }
    call(&f.app, Method::POST, &format!("/api/v1/projects/{ID}/sync"), None).await;
    assert!(!f.forge.requests().is_empty());
    assert!(f.forge.write_requests().is_empty());
}

fn segment() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("group%2Fapp".to_string()),
        Just("nope".to_string()),
        Just("%ZZ".to_string()),
        Just("versions".to_string()),
        Just("f".repeat(64)),
        "[a-zA-Z0-9_.~%-]{0,70}",
    ]
}

fn uri() -> impl Strategy<Value = String> {
    let tail = prop_oneof![
        Just("versions"),
        Just("bpmn"),
        Just("model"),
        Just("metrics"),
        Just("delta"),
        Just("diff"),
        Just("runs"),
        Just("overlay"),
        Just("sync"),
    ];
    (
        prop::collection::vec(segment(), 0..4),
        tail,
        prop::option::of("[a-z=&%0-9]{0,40}"),
    )
        .prop_map(|(segs, tail, query)| {
            let mut u = format!("/api/v1/projects/{}/{tail}", segs.join("/"));
            if let Some(q) = query {
                u.push('?');
                u.push_str(&q);
            }
            u
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(192))]

    #[test]
    fn every_error_body_is_an_api_error(
        uri in uri(),
        method in prop_oneof![Just(Method::GET), Just(Method::POST), Just(Method::PUT), Just(Method::DELETE)],
        body in prop::option::of(prop_oneof![Just(json!({})), Just(json!([1])), Just(json!({"base_url": "x"}))]),
    ) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let twin = Twin::start(Arc::new(Store::in_memory()), Bus::new(4)).await;
            twin.process_snapshot("group/app", &snapshot("java_app.yml", 1)).await.unwrap();
            let app = router(AppState::new(twin));
            let Ok(req) = Request::builder().method(method.clone()).uri(&uri).body(Body::empty()) else {
                return;
            };
            drop(req);
            let r = call(&app, method, &uri, body).await;
            if !r.status.is_success() {
                assert!(r.content_type.starts_with("application/json"), "{uri}: {}", r.content_type);
                let v: Value = serde_json::from_slice(&r.body).unwrap();
                let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
                assert_eq!(keys, vec!["code", "message", "status"], "{uri}");
                assert_eq!(r.error().status, r.status.as_u16());
            }
        });
    }
}
