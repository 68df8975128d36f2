//! Pulls configuration history and execution telemetry from a GitLab
//! instance over its v4 REST API.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use futures::{stream, StreamExt, TryStreamExt};
use pipetwin_core::model::{ExecutionStatus, JobRun, TriggerType};
use pipetwin_core::parser::Provenance;
use pipetwin_core::{compute_yaml_hash, PipelineRun, RawConfig};
use reqwest::header::HeaderMap;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch, OnceCell};
use tokio::task::JoinHandle;
use url::Url;

pub const DEFAULT_CI_FILE: &str = ".gitlab-ci.yml";
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(60);
const DEFAULT_PER_PAGE: usize = 100;
const FETCH_CONCURRENCY: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AcquisitionError {
    #[error("invalid project handle: {0}")]
    InvalidHandle(String),
    #[error("forge rejected the credentials (HTTP {status})")]
    AuthFailed { status: u16 },
    #[error("{what} not found")]
    NotFound { what: String },
    #[error("rate limited by the forge{}", retry_after.map(|d| format!(", retry after {}s", d.as_secs())).unwrap_or_default())]
    RateLimited { retry_after: Option<Duration> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("forge answered HTTP {status}: {message}")]
    Upstream { status: u16, message: String },
    #[error("unexpected response from the forge: {0}")]
    Decode(String),
    #[error("run {run_id} rejected: {reason}")]
    MappingRejected { run_id: u64, reason: String },
}

impl AcquisitionError {
    pub fn is_credential(&self) -> bool {
        matches!(self, AcquisitionError::AuthFailed { .. })
    }

    /// Whether retrying the same request later can succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            AcquisitionError::RateLimited { .. } | AcquisitionError::Transport(_) => true,
            AcquisitionError::Upstream { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

type Result<T, E = AcquisitionError> = std::result::Result<T, E>;

/// A credential that never leaves the process through `Debug` or serde.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Secret(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

/// Where a project lives and how to reach it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectHandle {
    /// API root, e.g. `https://gitlab.example.com/api/v4`.
    pub base_url: Url,
    /// Numeric id or `namespace/path`.
    pub project_id: String,
    #[serde(skip)]
    pub token: Option<Secret>,
    pub ci_file_path: String,
    /// Branch to follow; the project's default branch when absent.
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub git_ref: Option<String>,
}

impl ProjectHandle {
    /// Plain http is accepted for loopback hosts only.
    pub fn new(base_url: &str, project_id: impl Into<String>) -> Result<Self> {
        let url = Url::parse(base_url).map_err(|e| AcquisitionError::InvalidHandle(format!("{base_url}: {e}")))?;
        let loopback = match url.host() {
            Some(url::Host::Domain(d)) => d == "localhost",
            Some(url::Host::Ipv4(ip)) => ip.is_loopback(),
            Some(url::Host::Ipv6(ip)) => ip.is_loopback(),
            None => false,
        };
        match url.scheme() {
            "https" => {}
            "http" if loopback => {}
            other => {
                return Err(AcquisitionError::InvalidHandle(format!(
                    "{base_url}: scheme {other} is not allowed, use https"
                )))
            }
        }
        if url.cannot_be_a_base() {
            return Err(AcquisitionError::InvalidHandle(format!("{base_url}: not a base URL")));
        }
        let project_id = project_id.into();
        if project_id.is_empty() {
            return Err(AcquisitionError::InvalidHandle("empty project id".into()));
        }
        Ok(ProjectHandle {
            base_url: url,
            project_id,
            token: None,
            ci_file_path: DEFAULT_CI_FILE.into(),
            git_ref: None,
        })
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(Secret::new(token));
        self
    }

    pub fn with_ci_file(mut self, path: impl Into<String>) -> Self {
        self.ci_file_path = path.into();
        self
    }

    pub fn with_ref(mut self, git_ref: impl Into<String>) -> Self {
        self.git_ref = Some(git_ref.into());
        self
    }

    /// Identifier the twin files this project under.
    pub fn key(&self) -> &str {
        &self.project_id
    }
}

/// One version of the CI file as found at a commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub raw: RawConfig,
    pub fetched_at: DateTime<Utc>,
    pub committed_at: DateTime<Utc>,
}

impl ConfigSnapshot {
    pub fn yaml_hash(&self) -> String {
        self.raw.yaml_hash()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VersionQuery {
    pub limit: Option<usize>,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunFilter {
    pub sha: Option<String>,
    pub git_ref: Option<String>,
    pub limit: Option<usize>,
}

/// Mapped runs plus the ones that could not be mapped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunBatch {
    pub runs: Vec<PipelineRun>,
    pub rejected: Vec<AcquisitionError>,
}

#[derive(Debug, Deserialize)]
struct CommitItem {
    id: String,
    committed_date: String,
}

#[derive(Debug, Deserialize)]
struct ProjectItem {
    default_branch: Option<String>,
}

#[derive(Debug, Deserialize)]
struct PipelineSummary {
    id: u64,
    sha: String,
}

#[derive(Debug, Deserialize)]
struct PipelineDetail {
    id: u64,
    sha: String,
    status: String,
    source: Option<String>,
    #[serde(default)]
    tag: bool,
    started_at: Option<String>,
    finished_at: Option<String>,
    duration: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct JobItem {
    name: String,
    status: String,
    started_at: Option<String>,
    finished_at: Option<String>,
    duration: Option<f64>,
    queued_duration: Option<f64>,
    failure_reason: Option<String>,
}

type HashCell = Arc<OnceCell<Option<String>>>;

/// Read-only GitLab v4 client bound to one project.
#[derive(Clone)]
pub struct GitLabClient {
    http: reqwest::Client,
    handle: ProjectHandle,
    per_page: usize,
    default_branch: Arc<OnceCell<String>>,
    /// Configuration hash per commit; `None` when the file is absent there.
    hash_cache: Arc<Mutex<HashMap<String, HashCell>>>,
}

impl fmt::Debug for GitLabClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GitLabClient")
            .field("handle", &self.handle)
            .finish_non_exhaustive()
    }
}

impl GitLabClient {
    pub fn new(handle: ProjectHandle) -> Result<Self> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .user_agent(concat!("pipetwin/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| AcquisitionError::Transport(e.to_string()))?;
        Ok(GitLabClient {
            http,
            handle,
            per_page: DEFAULT_PER_PAGE,
            default_branch: Arc::new(OnceCell::new()),
            hash_cache: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    pub fn with_page_size(mut self, per_page: usize) -> Self {
        self.per_page = per_page.max(1);
        self
    }

    pub fn handle(&self) -> &ProjectHandle {
        &self.handle
    }

    fn url(&self, tail: &[&str]) -> Url {
        let mut url = self.handle.base_url.clone();
        {
            let mut segs = url.path_segments_mut().expect("checked in ProjectHandle::new");
            segs.pop_if_empty().push("projects").push(&self.handle.project_id);
            for s in tail {
                segs.push(s);
            }
        }
        url
    }

    async fn get(&self, url: Url, query: &[(&str, String)], what: &str) -> Result<(HeaderMap, Vec<u8>)> {
        let mut req = self.http.get(url).query(query);
        if let Some(t) = &self.handle.token {
            req = req.header("PRIVATE-TOKEN", t.expose());
        }
        let resp = req
            .send()
            .await
            .map_err(|e| AcquisitionError::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        let headers = resp.headers().clone();
        let body = resp
            .bytes()
            .await
            .map_err(|e| AcquisitionError::Transport(e.without_url().to_string()))?
            .to_vec();
        if status.is_success() {
            return Ok((headers, body));
        }
        Err(match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => AcquisitionError::AuthFailed {
                status: status.as_u16(),
            },
            StatusCode::NOT_FOUND => AcquisitionError::NotFound { what: what.to_string() },
            StatusCode::TOO_MANY_REQUESTS => AcquisitionError::RateLimited {
                retry_after: headers
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.trim().parse::<u64>().ok())
                    .map(Duration::from_secs),
            },
            _ => AcquisitionError::Upstream {
                status: status.as_u16(),
                message: serde_json::from_slice::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v.get("message").map(|m| m.to_string()))
                    .unwrap_or_else(|| String::from_utf8_lossy(&body).chars().take(200).collect()),
            },
        })
    }

    async fn get_json<T: serde::de::DeserializeOwned>(
        &self,
        url: Url,
        query: &[(&str, String)],
        what: &str,
    ) -> Result<(HeaderMap, T)> {
        let (headers, body) = self.get(url, query, what).await?;
        let value = serde_json::from_slice(&body).map_err(|e| AcquisitionError::Decode(format!("{what}: {e}")))?;
        Ok((headers, value))
    }

    /// Follows `x-next-page` until exhausted or `limit` items are collected.
    async fn paginate<T: serde::de::DeserializeOwned>(
        &self,
        tail: &[&str],
        query: &[(&str, String)],
        limit: Option<usize>,
        what: &str,
    ) -> Result<Vec<T>> {
        let mut out = Vec::new();
        let mut page = 1usize;
        loop {
            let mut q = query.to_vec();
            q.push(("per_page", self.per_page.to_string()));
            q.push(("page", page.to_string()));
            let (headers, items): (_, Vec<T>) = self.get_json(self.url(tail), &q, what).await?;
            let empty = items.is_empty();
            out.extend(items);
            if let Some(l) = limit {
                if out.len() >= l {
                    out.truncate(l);
                    break;
                }
            }
            let next = headers
                .get("x-next-page")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<usize>().ok());
            match next {
                Some(n) if n > page && !empty => page = n,
                _ => break,
            }
        }
        Ok(out)
    }

    pub async fn default_branch(&self) -> Result<String> {
        self.default_branch
            .get_or_try_init(|| async {
                let what = format!("project {}", self.handle.project_id);
                let (_, p): (_, ProjectItem) = self.get_json(self.url(&[]), &[], &what).await?;
                Ok(p.default_branch.unwrap_or_else(|| "main".into()))
            })
            .await
            .cloned()
    }

    async fn tracked_ref(&self) -> Result<String> {
        match &self.handle.git_ref {
            Some(r) => Ok(r.clone()),
            None => self.default_branch().await,
        }
    }

    /// The CI file at `sha`, or `None` when it does not exist there.
    async fn file_at(&self, sha: &str) -> Result<Option<Vec<u8>>> {
        let url = self.url(&["repository", "files", &self.handle.ci_file_path, "raw"]);
        match self
            .get(url, &[("ref", sha.to_string())], &self.handle.ci_file_path)
            .await
        {
            Ok((_, body)) => Ok(Some(body)),
            Err(AcquisitionError::NotFound { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn hash_cell(&self, sha: &str) -> HashCell {
        Arc::clone(self.hash_cache.lock().unwrap().entry(sha.to_string()).or_default())
    }

    /// Concurrent lookups of one commit share a single request.
    async fn hash_at(&self, sha: &str) -> Result<Option<String>> {
        self.hash_cell(sha)
            .get_or_try_init(|| async { Ok(self.file_at(sha).await?.map(|b| compute_yaml_hash(&b))) })
            .await
            .cloned()
    }

    async fn commits_touching_file(&self, q: &VersionQuery) -> Result<Vec<CommitItem>> {
        let git_ref = self.tracked_ref().await?;
        let mut query = vec![("ref_name", git_ref), ("path", self.handle.ci_file_path.clone())];
        if let Some(t) = q.since {
            query.push(("since", t.to_rfc3339()));
        }
        if let Some(t) = q.until {
            query.push(("until", t.to_rfc3339()));
        }
        let what = format!("project {}", self.handle.project_id);
        self.paginate(&["repository", "commits"], &query, q.limit, &what).await
    }

    async fn snapshot(&self, commit: &CommitItem, git_ref: &str) -> Result<Option<ConfigSnapshot>> {
        let Some(bytes) = self.file_at(&commit.id).await? else {
            tracing::debug!(sha = %commit.id, "file removed at commit");
            return Ok(None);
        };
        let _ = self.hash_cell(&commit.id).set(Some(compute_yaml_hash(&bytes)));
        let provenance = Provenance {
            git_ref: git_ref.to_string(),
            commit_sha: commit.id.clone(),
            file_path: self.handle.ci_file_path.clone(),
        };
        Ok(Some(ConfigSnapshot {
            raw: RawConfig::new(bytes, provenance),
            fetched_at: Utc::now(),
            committed_at: parse_ts(&commit.committed_date)?,
        }))
    }

    /// Versions of the CI file on the tracked ref, newest first. Equal
    /// consecutive contents are all returned.
    pub async fn list_config_versions(&self, q: &VersionQuery) -> Result<Vec<ConfigSnapshot>> {
        let commits = self.commits_touching_file(q).await?;
        if commits.is_empty() && q.since.is_none() && q.until.is_none() {
            return Err(AcquisitionError::NotFound {
                what: self.handle.ci_file_path.clone(),
            });
        }
        let git_ref = self.tracked_ref().await?;
        let snapshots: Vec<Option<ConfigSnapshot>> = stream::iter(commits)
            .map(|c| {
                let (this, git_ref) = (self.clone(), git_ref.clone());
                async move { this.snapshot(&c, &git_ref).await }
            })
            .buffered(FETCH_CONCURRENCY)
            .try_collect()
            .await?;
        Ok(snapshots.into_iter().flatten().collect())
    }

    /// Latest version on the tracked ref.
    pub async fn head_version(&self) -> Result<ConfigSnapshot> {
        let q = VersionQuery {
            limit: Some(1),
            ..Default::default()
        };
        self.list_config_versions(&q)
            .await?
            .into_iter()
            .next()
            .ok_or_else(|| AcquisitionError::NotFound {
                what: self.handle.ci_file_path.clone(),
            })
    }

    /// Pipelines with their jobs, newest first. Runs the model cannot
    /// represent are reported in `rejected`.
    pub async fn fetch_runs(&self, filter: &RunFilter) -> Result<RunBatch> {
        let mut query = Vec::new();
        if let Some(s) = &filter.sha {
            query.push(("sha", s.clone()));
        }
        if let Some(r) = &filter.git_ref {
            query.push(("ref", r.clone()));
        }
        let what = format!("project {}", self.handle.project_id);
        let list: Vec<PipelineSummary> = self.paginate(&["pipelines"], &query, filter.limit, &what).await?;
        let mapped: Vec<std::result::Result<PipelineRun, AcquisitionError>> = stream::iter(list)
            .map(|p| {
                let this = self.clone();
                async move { this.fetch_run(&p).await }
            })
            .buffered(FETCH_CONCURRENCY)
            .try_collect()
            .await?;
        let mut batch = RunBatch::default();
        for m in mapped {
            match m {
                Ok(run) => batch.runs.push(run),
                Err(e) => batch.rejected.push(e),
            }
        }
        Ok(batch)
    }

    /// Outer error aborts the batch; inner error rejects this run only.
    async fn fetch_run(&self, summary: &PipelineSummary) -> Result<std::result::Result<PipelineRun, AcquisitionError>> {
        let id = summary.id.to_string();
        let what = format!("pipeline {id}");
        let (_, detail): (_, PipelineDetail) = self.get_json(self.url(&["pipelines", &id]), &[], &what).await?;
        let jobs: Vec<JobItem> = self.paginate(&["pipelines", &id, "jobs"], &[], None, &what).await?;
        let Some(hash) = self.hash_at(&summary.sha).await? else {
            return Ok(Err(AcquisitionError::MappingRejected {
                run_id: summary.id,
                reason: format!("no {} at commit {}", self.handle.ci_file_path, summary.sha),
            }));
        };
        Ok(map_run(&detail, &jobs, hash))
    }
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| AcquisitionError::Decode(format!("timestamp {s:?}: {e}")))
}

fn parse_opt_ts(s: &Option<String>) -> std::result::Result<Option<DateTime<Utc>>, String> {
    s.as_deref().map(parse_ts).transpose().map_err(|e| e.to_string())
}

/// GitLab status names that have no counterpart are refused, not guessed.
pub fn map_status(name: &str) -> Option<ExecutionStatus> {
    ExecutionStatus::from_str(name).ok()
}

pub fn map_source(name: &str, tag: bool) -> Option<TriggerType> {
    Some(match name {
        "push" if tag => TriggerType::TagPush,
        "push" => TriggerType::Push,
        "merge_request_event" => TriggerType::MergeRequest,
        "schedule" => TriggerType::Schedule,
        "api" => TriggerType::Api,
        "web" => TriggerType::Web,
        _ => return None,
    })
}

fn map_run(
    d: &PipelineDetail,
    jobs: &[JobItem],
    yaml_hash: String,
) -> std::result::Result<PipelineRun, AcquisitionError> {
    let reject = |reason: String| AcquisitionError::MappingRejected { run_id: d.id, reason };
    let status = map_status(&d.status).ok_or_else(|| reject(format!("unknown pipeline status {:?}", d.status)))?;
    let source_name = d.source.as_deref().unwrap_or("push");
    let source =
        map_source(source_name, d.tag).ok_or_else(|| reject(format!("unknown pipeline source {source_name:?}")))?;
    let mut job_runs = Vec::with_capacity(jobs.len());
    for j in jobs {
        let status = map_status(&j.status)
            .ok_or_else(|| reject(format!("job {:?} has unknown status {:?}", j.name, j.status)))?;
        job_runs.push(JobRun {
            job_name: j.name.clone(),
            status,
            started_at: parse_opt_ts(&j.started_at).map_err(&reject)?,
            finished_at: parse_opt_ts(&j.finished_at).map_err(&reject)?,
            duration_s: j.duration,
            queued_s: j.queued_duration,
            failure_reason: if status == ExecutionStatus::Failed {
                j.failure_reason.clone()
            } else {
                None
            },
        });
    }
    job_runs.sort_by(|a, b| a.job_name.cmp(&b.job_name));
    let run = PipelineRun {
        run_id: d.id,
        pipeline_yaml_hash: yaml_hash,
        status,
        started_at: parse_opt_ts(&d.started_at).map_err(&reject)?,
        finished_at: parse_opt_ts(&d.finished_at).map_err(&reject)?,
        duration_s: d.duration,
        source,
        job_runs,
    };
    run.check().map_err(|e| reject(e.to_string()))?;
    tracing::trace!(run = d.id, sha = %d.sha, "mapped run");
    Ok(run)
}

/// A new structural version observed on the tracked ref.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeDetection {
    pub project: String,
    pub previous_hash: Option<String>,
    pub yaml_hash: String,
    pub snapshot: ConfigSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackerConfig {
    pub poll_interval: Duration,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            poll_interval: DEFAULT_POLL_INTERVAL,
            backoff_base: Duration::from_secs(1),
            backoff_cap: Duration::from_secs(300),
        }
    }
}

/// Delay before retry number `attempt` (zero-based).
pub fn backoff_delay(attempt: u32, base: Duration, cap: Duration) -> Duration {
    let factor = 1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX);
    base.checked_mul(factor).unwrap_or(cap).min(cap)
}

/// Polls the head of the tracked ref and reports content changes.
#[derive(Debug)]
pub struct ChangeTracker {
    client: GitLabClient,
    last_sha: Option<String>,
    last_hash: Option<String>,
}

/// A running tracker. Dropping `events` stops it at the next poll.
pub struct TrackerHandle {
    pub events: mpsc::Receiver<Result<ChangeDetection>>,
    /// Completed polls, successful or not.
    pub polls: watch::Receiver<u64>,
    pub task: JoinHandle<()>,
}

impl ChangeTracker {
    /// `last_hash` is the newest version already known, if any.
    pub fn new(client: GitLabClient, last_hash: Option<String>) -> Self {
        ChangeTracker {
            client,
            last_sha: None,
            last_hash,
        }
    }

    pub fn last_hash(&self) -> Option<&str> {
        self.last_hash.as_deref()
    }

    pub async fn poll_once(&mut self) -> Result<Option<ChangeDetection>> {
        let q = VersionQuery {
            limit: Some(1),
            ..Default::default()
        };
        let head = self
            .client
            .commits_touching_file(&q)
            .await?
            .into_iter()
            .next()
            .ok_or_else(|| AcquisitionError::NotFound {
                what: self.client.handle.ci_file_path.clone(),
            })?;
        if self.last_sha.as_deref() == Some(head.id.as_str()) {
            return Ok(None);
        }
        let git_ref = self.client.tracked_ref().await?;
        let Some(snapshot) = self.client.snapshot(&head, &git_ref).await? else {
            return Ok(None);
        };
        self.last_sha = Some(head.id);
        let hash = snapshot.yaml_hash();
        if self.last_hash.as_deref() == Some(hash.as_str()) {
            return Ok(None);
        }
        let previous_hash = self.last_hash.replace(hash.clone());
        Ok(Some(ChangeDetection {
            project: self.client.handle.key().to_string(),
            previous_hash,
            yaml_hash: hash,
            snapshot,
        }))
    }

    pub fn spawn(mut self, config: TrackerConfig) -> TrackerHandle {
        let (tx, rx) = mpsc::channel(16);
        let (polls_tx, polls_rx) = watch::channel(0u64);
        let task = tokio::spawn(async move {
            let mut failures = 0u32;
            while !tx.is_closed() {
                let outcome = self.poll_once().await;
                let delay = match outcome {
                    Ok(event) => {
                        failures = 0;
                        if let Some(e) = event {
                            if tx.send(Ok(e)).await.is_err() {
                                break;
                            }
                        }
                        config.poll_interval
                    }
                    Err(e) if e.is_credential() => {
                        tracing::error!(project = %self.client.handle.key(), "stopping change tracking: {e}");
                        let _ = tx.send(Err(e)).await;
                        polls_tx.send_modify(|n| *n += 1);
                        break;
                    }
                    Err(e) => {
                        let mut d = backoff_delay(failures, config.backoff_base, config.backoff_cap);
                        if let AcquisitionError::RateLimited { retry_after: Some(r) } = &e {
                            d = d.max(*r);
                        }
                        failures = failures.saturating_add(1);
                        tracing::warn!(project = %self.client.handle.key(), retry_in = ?d, "poll failed: {e}");
                        d
                    }
                };
                polls_tx.send_modify(|n| *n += 1);
                tokio::time::sleep(delay).await;
            }
        });
        TrackerHandle {
            events: rx,
            polls: polls_rx,
            task,
        }
    }
}

/// Starts tracking `client`'s project from the given known hash.
pub fn track_changes(client: GitLabClient, last_hash: Option<String>, config: TrackerConfig) -> TrackerHandle {
    ChangeTracker::new(client, last_hash).spawn(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handle_accepts_https_and_loopback_http() {
        assert!(ProjectHandle::new("https://gitlab.example.com/api/v4", "7").is_ok());
        assert!(ProjectHandle::new("http://127.0.0.1:9/api/v4", "7").is_ok());
        assert!(ProjectHandle::new("http://localhost/api/v4", "7").is_ok());
        assert!(ProjectHandle::new("http://gitlab.example.com/api/v4", "7").is_err());
        assert!(ProjectHandle::new("ftp://127.0.0.1/", "7").is_err());
        assert!(ProjectHandle::new("https://gitlab.example.com/api/v4", "").is_err());
    }

    #[test]
    fn token_is_masked_and_never_serialized() {
        let h = ProjectHandle::new("https://gitlab.example.com/api/v4", "group/app")
            .unwrap()
            .with_token("glpat-s3cret");
        assert!(!format!("{h:?}").contains("s3cret"));
        let json = serde_json::to_string(&h).unwrap();
        assert!(!json.contains("s3cret"), "{json}");
        let back: ProjectHandle = serde_json::from_str(&json).unwrap();
        assert_eq!(back.token, None);
    }

    #[test]
    fn urls_escape_path_ids_and_file_paths() {
        let h = ProjectHandle::new("https://gitlab.example.com/api/v4/", "group/app")
            .unwrap()
            .with_ci_file("ci/main.yml");
        let c = GitLabClient::new(h).unwrap();
        let u = c.url(&["repository", "files", "ci/main.yml", "raw"]);
        assert_eq!(
            u.as_str(),
            "https://gitlab.example.com/api/v4/projects/group%2Fapp/repository/files/ci%2Fmain.yml/raw"
        );
    }

    #[test]
    fn backoff_doubles_up_to_the_cap() {
        let (base, cap) = (Duration::from_secs(1), Duration::from_secs(300));
        let d: Vec<u64> = (0..12).map(|a| backoff_delay(a, base, cap).as_secs()).collect();
        assert_eq!(d, [1, 2, 4, 8, 16, 32, 64, 128, 256, 300, 300, 300]);
        assert_eq!(backoff_delay(u32::MAX, base, cap), cap);
    }

    #[test]
    fn status_mapping_is_exact() {
        for s in ExecutionStatus::ALL {
            assert_eq!(map_status(s.as_str()), Some(*s));
        }
        for s in [
            "created",
            "waiting_for_resource",
            "preparing",
            "scheduled",
            "SUCCESS",
            "",
        ] {
            assert_eq!(map_status(s), None, "{s}");
        }
    }

    #[test]
    fn sources_map_with_tag_flag() {
        assert_eq!(map_source("push", true), Some(TriggerType::TagPush));
        assert_eq!(map_source("push", false), Some(TriggerType::Push));
        assert_eq!(
            map_source("merge_request_event", false),
            Some(TriggerType::MergeRequest)
        );
        assert_eq!(map_source("trigger", false), None);
    }

    #[test]
    fn timestamps_normalize_to_utc() {
        let t = parse_ts("2024-03-01T10:00:00.000+02:00").unwrap();
        assert_eq!(t.to_rfc3339(), "2024-03-01T08:00:00+00:00");
    }
}
