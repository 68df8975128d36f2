//! A scripted GitLab REST v4 stand-in. It serves the commit, file,
//! pipeline and job endpoints with GitLab's JSON shapes and pagination
//! headers, records every request, and can inject error responses.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, FixedOffset, SecondsFormat, Utc};
use pipetwin_core::model::{ExecutionStatus, TriggerType};
use pipetwin_core::{Pipeline, PipelineRun};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;

#[derive(Debug, Clone)]
pub struct MockCommit {
    pub sha: String,
    pub committed_date: DateTime<Utc>,
    pub message: String,
    /// New file content, or `None` if the commit leaves the file alone.
    pub content: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MockJob {
    pub id: u64,
    pub name: String,
    pub stage: String,
    pub status: String,
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
    pub duration: Option<f64>,
    pub queued_duration: Option<f64>,
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MockPipeline {
    pub id: u64,
    pub sha: String,
    pub git_ref: String,
    pub status: String,
    pub source: String,
    pub tag: bool,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub duration: Option<f64>,
    pub queued_duration: Option<f64>,
    pub jobs: Vec<MockJob>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRequest {
    pub method: Method,
    pub path: String,
    pub query: String,
}

#[derive(Debug, Clone)]
struct Injected {
    status: StatusCode,
    retry_after: Option<u64>,
}

#[derive(Debug)]
pub struct ForgeState {
    pub project_id: u64,
    pub project_path: String,
    pub file_path: String,
    pub default_branch: String,
    pub token: Option<String>,
    /// Oldest first.
    pub commits: Vec<MockCommit>,
    pub pipelines: Vec<MockPipeline>,
    pub requests: Vec<RecordedRequest>,
    injected: VecDeque<Injected>,
}

impl ForgeState {
    fn new() -> Self {
        ForgeState {
            project_id: 42,
            project_path: "group/app".into(),
            file_path: ".gitlab-ci.yml".into(),
            default_branch: "main".into(),
            token: None,
            commits: Vec::new(),
            pipelines: Vec::new(),
            requests: Vec::new(),
            injected: VecDeque::new(),
        }
    }

    fn knows_project(&self, id: &str) -> bool {
        id == self.project_id.to_string() || id == self.project_path
    }

    /// File content as of `sha`: the latest touching commit at or before it.
    fn file_at(&self, sha: &str) -> Option<&[u8]> {
        let idx = self.commits.iter().position(|c| c.sha == sha)?;
        self.commits[..=idx].iter().rev().find_map(|c| c.content.as_deref())
    }
}

type Shared = Arc<Mutex<ForgeState>>;

/// A running mock forge bound to a loopback port.
pub struct MockForge {
    pub addr: SocketAddr,
    state: Shared,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockForge {
    /// Starts serving on the current tokio runtime.
    pub async fn start() -> MockForge {
        let state: Shared = Arc::new(Mutex::new(ForgeState::new()));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(state.clone());
        tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .expect("mock forge serve");
        });
        MockForge {
            addr,
            state,
            shutdown: Some(tx),
        }
    }

    /// API root, e.g. `http://127.0.0.1:PORT/api/v4`.
    pub fn api_root(&self) -> String {
        format!("http://{}/api/v4", self.addr)
    }

    pub fn state(&self) -> MutexGuard<'_, ForgeState> {
        self.state.lock().unwrap()
    }

    pub fn project_id(&self) -> u64 {
        self.state().project_id
    }

    pub fn set_token(&self, token: &str) {
        self.state().token = Some(token.to_string());
    }

    /// Appends a commit that writes `content` to the CI file.
    pub fn push_commit(&self, sha: &str, at: DateTime<Utc>, content: &[u8]) {
        self.state().commits.push(MockCommit {
            sha: sha.to_string(),
            committed_date: at,
            message: format!("update {sha}"),
            content: Some(content.to_vec()),
        });
    }

    /// Appends a commit that does not touch the CI file.
    pub fn push_unrelated_commit(&self, sha: &str, at: DateTime<Utc>) {
        self.state().commits.push(MockCommit {
            sha: sha.to_string(),
            committed_date: at,
            message: format!("unrelated {sha}"),
            content: None,
        });
    }

    pub fn add_pipeline(&self, p: MockPipeline) {
        self.state().pipelines.push(p);
    }

    /// Registers runs as pipelines at `sha`, with job stages taken from
    /// `model`.
    pub fn add_runs(&self, sha: &str, model: &Pipeline, runs: &[PipelineRun]) {
        let default_branch = self.state().default_branch.clone();
        for r in runs {
            self.add_pipeline(pipeline_from_run(r, sha, &default_branch, model));
        }
    }

    /// Commits the two inkscape-shaped versions and attaches the run
    /// profiles to them. Returns both version hashes.
    pub fn seed_inkscape(&self) -> (String, String) {
        let (b1, b2) = (
            crate::fixtures::read("inkscape_v1.yml"),
            crate::fixtures::read("inkscape_v2.yml"),
        );
        let (m1, m2) = (
            crate::fixtures::pipeline("inkscape_v1.yml"),
            crate::fixtures::pipeline("inkscape_v2.yml"),
        );
        let t0 = crate::runs::epoch() - chrono::Duration::days(1);
        self.push_commit(&sha(1), t0, &b1);
        self.push_commit(&sha(2), t0 + chrono::Duration::days(30), &b2);
        self.add_runs(
            &sha(1),
            &m1,
            &crate::runs::build_runs(&m1, &crate::runs::v1_profile(), 1000, 0),
        );
        self.add_runs(
            &sha(2),
            &m2,
            &crate::runs::build_runs(&m2, &crate::runs::v2_profile(), 2000, 24 * 30),
        );
        (m1.yaml_hash, m2.yaml_hash)
    }

    /// The next `times` requests get `status` instead of a real answer.
    pub fn inject(&self, status: u16, retry_after: Option<u64>, times: usize) {
        let mut s = self.state();
        for _ in 0..times {
            s.injected.push_back(Injected {
                status: StatusCode::from_u16(status).expect("valid status"),
                retry_after,
            });
        }
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state().requests.clone()
    }

    pub fn clear_requests(&self) {
        self.state().requests.clear();
    }

    pub fn write_requests(&self) -> Vec<RecordedRequest> {
        self.requests()
            .into_iter()
            .filter(|r| r.method != Method::GET)
            .collect()
    }
}

impl Drop for MockForge {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// A mock forge with its own runtime, for synchronous tests.
pub struct BackgroundForge {
    pub forge: MockForge,
    runtime: Option<tokio::runtime::Runtime>,
}

impl BackgroundForge {
    pub fn start() -> BackgroundForge {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("runtime");
        let forge = runtime.block_on(MockForge::start());
        BackgroundForge {
            forge,
            runtime: Some(runtime),
        }
    }

    /// Runs `fut` on the forge's runtime.
    pub fn block_on<F: std::future::Future>(&self, fut: F) -> F::Output {
        self.runtime.as_ref().expect("running").block_on(fut)
    }
}

impl std::ops::Deref for BackgroundForge {
    type Target = MockForge;
    fn deref(&self) -> &MockForge {
        &self.forge
    }
}

impl Drop for BackgroundForge {
    fn drop(&mut self) {
        if let Some(tx) = self.forge.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Deterministic 40-hex commit id.
pub fn sha(n: u64) -> String {
    format!("{n:040x}")
}

/// GitLab reports commit dates in the committer's offset.
fn committer_ts(t: DateTime<Utc>) -> String {
    let offset = FixedOffset::east_opt(2 * 3600).unwrap();
    t.with_timezone(&offset).to_rfc3339_opts(SecondsFormat::Millis, false)
}

pub fn status_name(s: ExecutionStatus) -> &'static str {
    s.as_str()
}

pub fn source_name(t: TriggerType) -> (&'static str, bool) {
    match t {
        TriggerType::Push => ("push", false),
        TriggerType::MergeRequest => ("merge_request_event", false),
        TriggerType::Schedule => ("schedule", false),
        TriggerType::Api => ("api", false),
        TriggerType::Web => ("web", false),
        TriggerType::TagPush => ("push", true),
    }
}

/// GitLab's view of a run.
pub fn pipeline_from_run(r: &PipelineRun, sha: &str, git_ref: &str, model: &Pipeline) -> MockPipeline {
    let (source, tag) = source_name(r.source);
    let created = r.started_at.unwrap_or_else(crate::runs::epoch);
    MockPipeline {
        id: r.run_id,
        sha: sha.to_string(),
        git_ref: git_ref.to_string(),
        status: status_name(r.status).to_string(),
        source: source.to_string(),
        tag,
        created_at: created,
        started_at: r.started_at,
        finished_at: r.finished_at,
        duration: r.duration_s,
        queued_duration: Some(0.5),
        jobs: r
            .job_runs
            .iter()
            .enumerate()
            .map(|(i, j)| MockJob {
                id: r.run_id * 1000 + i as u64,
                name: j.job_name.clone(),
                stage: model.job(&j.job_name).map(|x| x.stage.clone()).unwrap_or_default(),
                status: status_name(j.status).to_string(),
                started_at: j.started_at.map(ts),
                finished_at: j.finished_at.map(ts),
                duration: j.duration_s,
                queued_duration: j.queued_s,
                failure_reason: j.failure_reason.clone(),
            })
            .collect(),
    }
}

fn pipeline_summary(p: &MockPipeline, project_id: u64) -> Value {
    json!({
        "id": p.id,
        "iid": p.id,
        "project_id": project_id,
        "sha": p.sha,
        "ref": p.git_ref,
        "status": p.status,
        "source": p.source,
        "created_at": ts(p.created_at),
        "updated_at": ts(p.finished_at.unwrap_or(p.created_at)),
        "web_url": format!("https://gitlab.example.com/pipelines/{}", p.id),
    })
}

fn pipeline_detail(p: &MockPipeline, project_id: u64) -> Value {
    let mut v = pipeline_summary(p, project_id);
    let m = v.as_object_mut().unwrap();
    m.insert("tag".into(), json!(p.tag));
    m.insert("started_at".into(), json!(p.started_at.map(ts)));
    m.insert("finished_at".into(), json!(p.finished_at.map(ts)));
    // GitLab reports whole seconds for pipelines.
    m.insert("duration".into(), json!(p.duration.map(|d| d.round() as i64)));
    m.insert("queued_duration".into(), json!(p.queued_duration));
    v
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "message": message }))).into_response()
}

fn paginate(items: Vec<Value>, q: &HashMap<String, String>) -> Response {
    let per_page: usize = q
        .get("per_page")
        .and_then(|v| v.parse().ok())
        .unwrap_or(20)
        .clamp(1, 100);
    let page: usize = q.get("page").and_then(|v| v.parse().ok()).unwrap_or(1).max(1);
    let total = items.len();
    let total_pages = total.div_ceil(per_page).max(1);
    let body: Vec<Value> = items.into_iter().skip((page - 1) * per_page).take(per_page).collect();
    let mut headers = HeaderMap::new();
    let next = if page < total_pages {
        (page + 1).to_string()
    } else {
        String::new()
    };
    for (k, v) in [
        ("x-page", page.to_string()),
        ("x-per-page", per_page.to_string()),
        ("x-next-page", next),
        ("x-total", total.to_string()),
        ("x-total-pages", total_pages.to_string()),
    ] {
        headers.insert(k, HeaderValue::from_str(&v).unwrap());
    }
    (StatusCode::OK, headers, Json(body)).into_response()
}

fn parse_time(q: &HashMap<String, String>, key: &str) -> Option<DateTime<Utc>> {
    q.get(key)
        .and_then(|v| DateTime::parse_from_rfc3339(v).ok())
        .map(|t| t.with_timezone(&Utc))
}

async fn commits(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let s = s.lock().unwrap();
    if !s.knows_project(&id) {
        return error(StatusCode::NOT_FOUND, "404 Project Not Found");
    }
    let path = q.get("path");
    let (since, until) = (parse_time(&q, "since"), parse_time(&q, "until"));
    let items: Vec<Value> = s
        .commits
        .iter()
        .rev()
        .filter(|c| path.is_none() || (path == Some(&s.file_path) && c.content.is_some()))
        .filter(|c| since.is_none_or(|t| c.committed_date >= t))
        .filter(|c| until.is_none_or(|t| c.committed_date <= t))
        .map(|c| {
            json!({
                "id": c.sha,
                "short_id": &c.sha[..c.sha.len().min(8)],
                "title": c.message,
                "message": c.message,
                "author_name": "Dev",
                "committed_date": committer_ts(c.committed_date),
                "authored_date": committer_ts(c.committed_date),
                "created_at": committer_ts(c.committed_date),
            })
        })
        .collect();
    paginate(items, &q)
}

async fn raw_file(
    State(s): State<Shared>,
    Path((id, file)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let s = s.lock().unwrap();
    if !s.knows_project(&id) {
        return error(StatusCode::NOT_FOUND, "404 Project Not Found");
    }
    let Some(git_ref) = q.get("ref") else {
        return error(StatusCode::BAD_REQUEST, "400 ref is missing");
    };
    let sha = if git_ref == &s.default_branch {
        s.commits.last().map(|c| c.sha.clone()).unwrap_or_default()
    } else {
        git_ref.clone()
    };
    match s.file_at(&sha) {
        Some(bytes) if file == s.file_path => (StatusCode::OK, bytes.to_vec()).into_response(),
        _ => error(StatusCode::NOT_FOUND, "404 File Not Found"),
    }
}

async fn project(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    let s = s.lock().unwrap();
    if !s.knows_project(&id) {
        return error(StatusCode::NOT_FOUND, "404 Project Not Found");
    }
    Json(json!({
        "id": s.project_id,
        "path_with_namespace": s.project_path,
        "default_branch": s.default_branch,
    }))
    .into_response()
}

async fn pipelines(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let s = s.lock().unwrap();
    if !s.knows_project(&id) {
        return error(StatusCode::NOT_FOUND, "404 Project Not Found");
    }
    let mut list: Vec<&MockPipeline> = s
        .pipelines
        .iter()
        .filter(|p| q.get("sha").is_none_or(|v| *v == p.sha))
        .filter(|p| q.get("ref").is_none_or(|v| *v == p.git_ref))
        .collect();
    list.sort_by_key(|p| std::cmp::Reverse(p.id));
    let items = list.into_iter().map(|p| pipeline_summary(p, s.project_id)).collect();
    paginate(items, &q)
}

async fn pipeline(State(s): State<Shared>, Path((id, pid)): Path<(String, u64)>) -> Response {
    let s = s.lock().unwrap();
    if !s.knows_project(&id) {
        return error(StatusCode::NOT_FOUND, "404 Project Not Found");
    }
    match s.pipelines.iter().find(|p| p.id == pid) {
        Some(p) => Json(pipeline_detail(p, s.project_id)).into_response(),
        None => error(StatusCode::NOT_FOUND, "404 Not found"),
    }
}

async fn jobs(
    State(s): State<Shared>,
    Path((id, pid)): Path<(String, u64)>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let s = s.lock().unwrap();
    if !s.knows_project(&id) {
        return error(StatusCode::NOT_FOUND, "404 Project Not Found");
    }
    match s.pipelines.iter().find(|p| p.id == pid) {
        Some(p) => paginate(p.jobs.iter().map(|j| serde_json::to_value(j).unwrap()).collect(), &q),
        None => error(StatusCode::NOT_FOUND, "404 Not found"),
    }
}

async fn gate(State(s): State<Shared>, req: Request, next: Next) -> Response {
    {
        let mut st = s.lock().unwrap();
        st.requests.push(RecordedRequest {
            method: req.method().clone(),
            path: req.uri().path().to_string(),
            query: req.uri().query().unwrap_or_default().to_string(),
        });
        if let Some(expected) = &st.token {
            let given = req.headers().get("private-token").and_then(|v| v.to_str().ok());
            if given != Some(expected.as_str()) {
                return error(StatusCode::UNAUTHORIZED, "401 Unauthorized");
            }
        }
        if let Some(inj) = st.injected.pop_front() {
            let mut resp = error(inj.status, inj.status.canonical_reason().unwrap_or("injected"));
            if let Some(secs) = inj.retry_after {
                resp.headers_mut()
                    .insert("retry-after", HeaderValue::from_str(&secs.to_string()).unwrap());
            }
            return resp;
        }
    }
    next.run(req).await
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/v4/projects/{id}", get(project))
        .route("/api/v4/projects/{id}/repository/commits", get(commits))
        .route("/api/v4/projects/{id}/repository/files/{file}/raw", get(raw_file))
        .route("/api/v4/projects/{id}/pipelines", get(pipelines))
        .route("/api/v4/projects/{id}/pipelines/{pid}", get(pipeline))
        .route("/api/v4/projects/{id}/pipelines/{pid}/jobs", get(jobs))
        .fallback(|| async { error(StatusCode::NOT_FOUND, "404 Not Found") })
        .layer(middleware::from_fn_with_state(state.clone(), gate))
        .with_state(state)
}
