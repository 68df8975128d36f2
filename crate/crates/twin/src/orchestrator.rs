//! The twin loop: snapshots become models and BPMN documents, execution
//! data becomes stored runs, and forge changes flow back in as snapshots.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use pipetwin_core::analytics::{aggregate, AnalyticsError, VersionMetrics};
use pipetwin_core::parser::ParseError;
use pipetwin_core::{generate, parse, PipelineRun};
use serde::Serialize;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::acquisition::{
    AcquisitionError, ChangeDetection, ConfigSnapshot, GitLabClient, ProjectHandle, RunFilter, TrackerConfig,
    VersionQuery,
};
use crate::bus::{BpmnXml, Bus, BusError, Envelope, ExecutionData, SnapshotMessage, Topic};
use crate::store::{Store, StoreError, VersionRecord};

#[derive(Debug, thiserror::Error)]
pub enum TwinError {
    #[error("project {0:?} is not registered")]
    UnknownProject(String),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

type Result<T, E = TwinError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotOutcome {
    Generated,
    /// The analytical store already held this version's document.
    Cached,
    /// The model was stored but no document could be produced.
    GenerationFailed,
}

/// A message the loop could not handle. The loop moved on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessingFailure {
    pub topic: Topic,
    pub sequence: u64,
    pub project: Option<String>,
    pub yaml_hash: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SyncReport {
    pub project: String,
    pub snapshots: usize,
    pub versions: usize,
    pub new_versions: usize,
    pub runs: usize,
    pub rejected_runs: Vec<String>,
    pub failures: Vec<ProcessingFailure>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TwinStatus {
    pub generations: u64,
    pub snapshots_processed: u64,
    pub change_events: u64,
    pub run_batches: u64,
    /// Last handled sequence per topic.
    pub processed: HashMap<Topic, u64>,
    pub projects: Vec<String>,
    pub tracking: Vec<String>,
    pub failures: Vec<ProcessingFailure>,
}

struct Tracking {
    polls: watch::Receiver<u64>,
    task: JoinHandle<()>,
}

type AsyncLock = Arc<tokio::sync::Mutex<()>>;

pub struct Twin {
    store: Arc<Store>,
    bus: Bus,
    generations: AtomicU64,
    snapshots_processed: AtomicU64,
    change_events: AtomicU64,
    run_batches: AtomicU64,
    key_locks: Mutex<HashMap<(String, String), AsyncLock>>,
    sync_locks: Mutex<HashMap<String, AsyncLock>>,
    metrics_cache: Mutex<HashMap<(String, String), VersionMetrics>>,
    failures: Mutex<Vec<ProcessingFailure>>,
    processed: watch::Sender<HashMap<Topic, u64>>,
    clients: Mutex<HashMap<String, GitLabClient>>,
    /// Newest known version per project, seeded by sync.
    heads: Mutex<HashMap<String, String>>,
    tracking: Mutex<HashMap<String, Tracking>>,
    loops: Mutex<Vec<JoinHandle<()>>>,
}

const CONSUMED: [Topic; 3] = [Topic::ConfigSnapshot, Topic::ChangeDetection, Topic::ExecutionData];

impl Twin {
    /// Builds the twin and starts its consumers on the current runtime.
    pub async fn start(store: Arc<Store>, bus: Bus) -> Arc<Twin> {
        let (processed, _) = watch::channel(HashMap::new());
        let twin = Arc::new(Twin {
            store,
            bus,
            generations: AtomicU64::new(0),
            snapshots_processed: AtomicU64::new(0),
            change_events: AtomicU64::new(0),
            run_batches: AtomicU64::new(0),
            key_locks: Mutex::default(),
            sync_locks: Mutex::default(),
            metrics_cache: Mutex::default(),
            failures: Mutex::default(),
            processed,
            clients: Mutex::default(),
            heads: Mutex::default(),
            tracking: Mutex::default(),
            loops: Mutex::default(),
        });
        let mut loops = Vec::new();
        for topic in CONSUMED {
            let mut sub = twin.bus.subscribe(topic).await;
            let t = Arc::clone(&twin);
            loops.push(tokio::spawn(async move {
                while let Some(env) = sub.recv().await {
                    t.dispatch(&env).await;
                    t.processed.send_modify(|m| {
                        m.insert(env.topic, env.sequence);
                    });
                }
            }));
        }
        *twin.loops.lock().unwrap() = loops;
        twin
    }

    /// Stops consumers and trackers.
    pub fn shutdown(&self) {
        for h in self.loops.lock().unwrap().drain(..) {
            h.abort();
        }
        for (_, t) in self.tracking.lock().unwrap().drain() {
            t.task.abort();
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    /// Number of BPMN generations performed since start.
    pub fn generations(&self) -> u64 {
        self.generations.load(Ordering::SeqCst)
    }

    pub fn failures(&self) -> Vec<ProcessingFailure> {
        self.failures.lock().unwrap().clone()
    }

    pub fn status(&self) -> TwinStatus {
        let mut projects: Vec<String> = self.clients.lock().unwrap().keys().cloned().collect();
        projects.sort();
        let mut tracking: Vec<String> = self.tracking.lock().unwrap().keys().cloned().collect();
        tracking.sort();
        TwinStatus {
            generations: self.generations(),
            snapshots_processed: self.snapshots_processed.load(Ordering::SeqCst),
            change_events: self.change_events.load(Ordering::SeqCst),
            run_batches: self.run_batches.load(Ordering::SeqCst),
            processed: self.processed.borrow().clone(),
            projects,
            tracking,
            failures: self.failures(),
        }
    }

    /// Waits until the consumer of `topic` has handled `sequence`.
    pub async fn wait_processed(&self, topic: Topic, sequence: u64) {
        let mut rx = self.processed.subscribe();
        let _ = rx.wait_for(|m| m.get(&topic).copied().unwrap_or(0) >= sequence).await;
    }

    fn lock_for<K: std::hash::Hash + Eq + Clone>(
        map: &Mutex<HashMap<K, Arc<tokio::sync::Mutex<()>>>>,
        key: &K,
    ) -> Arc<tokio::sync::Mutex<()>> {
        Arc::clone(map.lock().unwrap().entry(key.clone()).or_default())
    }

    fn record_failure(&self, env: &Envelope, project: Option<&str>, yaml_hash: Option<&str>, error: String) {
        tracing::warn!(topic = %env.topic, sequence = env.sequence, "skipping message: {error}");
        self.failures.lock().unwrap().push(ProcessingFailure {
            topic: env.topic,
            sequence: env.sequence,
            project: project.map(String::from),
            yaml_hash: yaml_hash.map(String::from),
            error,
        });
    }

    async fn dispatch(&self, env: &Envelope) {
        match env.topic {
            Topic::ConfigSnapshot => match env.decode::<SnapshotMessage>() {
                Ok(m) => {
                    if let Err(e) = self.process_snapshot(&m.project, &m.snapshot).await {
                        self.record_failure(env, Some(&m.project), Some(&m.snapshot.yaml_hash()), e.to_string());
                    }
                }
                Err(e) => self.record_failure(env, None, None, e.to_string()),
            },
            Topic::ChangeDetection => match env.decode::<ChangeDetection>() {
                Ok(c) => {
                    self.change_events.fetch_add(1, Ordering::SeqCst);
                    match self.process_snapshot(&c.project, &c.snapshot).await {
                        Ok(_) => {
                            self.heads
                                .lock()
                                .unwrap()
                                .insert(c.project.clone(), c.yaml_hash.clone());
                        }
                        Err(e) => self.record_failure(env, Some(&c.project), Some(&c.yaml_hash), e.to_string()),
                    }
                }
                Err(e) => self.record_failure(env, None, None, e.to_string()),
            },
            Topic::ExecutionData => match env.decode::<ExecutionData>() {
                Ok(d) => {
                    if let Err(e) = self.process_runs(&d.project, &d.runs) {
                        self.record_failure(env, Some(&d.project), None, e.to_string());
                    }
                }
                Err(e) => self.record_failure(env, None, None, e.to_string()),
            },
            Topic::BpmnXml => {}
        }
    }

    /// parse (which validates), operational store, then generation unless the
    /// analytical store already has the document.
    pub async fn process_snapshot(&self, project: &str, snapshot: &ConfigSnapshot) -> Result<SnapshotOutcome> {
        let hash = snapshot.yaml_hash();
        let lock = Self::lock_for(&self.key_locks, &(project.to_string(), hash.clone()));
        let _guard = lock.lock().await;
        self.snapshots_processed.fetch_add(1, Ordering::SeqCst);

        let pipeline = parse(&snapshot.raw)?;
        // The earliest commit carrying this content names the version.
        let earlier_known = match self.store.version(project, &hash) {
            Ok(v) => v.first_seen <= snapshot.committed_at,
            Err(StoreError::NotFound { .. }) => false,
            Err(e) => return Err(e.into()),
        };
        if !earlier_known || !self.store.contains(&crate::store::StoreKey::model(project, &hash)) {
            self.store.put_model(project, &pipeline)?;
            self.store.put_version(
                project,
                &VersionRecord {
                    yaml_hash: hash.clone(),
                    commit_sha: pipeline.commit_sha.clone(),
                    git_ref: pipeline.git_ref.clone(),
                    first_seen: snapshot.committed_at,
                    job_count: pipeline.jobs.len(),
                },
            )?;
        }

        if self.store.contains(&crate::store::StoreKey::bpmn(project, &hash)) {
            return Ok(SnapshotOutcome::Cached);
        }
        self.generations.fetch_add(1, Ordering::SeqCst);
        let doc = match generate(&pipeline) {
            Ok(doc) => doc,
            Err(e) => {
                tracing::warn!(project, yaml_hash = %hash, "generation failed: {e}");
                self.failures.lock().unwrap().push(ProcessingFailure {
                    topic: Topic::BpmnXml,
                    sequence: 0,
                    project: Some(project.to_string()),
                    yaml_hash: Some(hash.clone()),
                    error: e.to_string(),
                });
                return Ok(SnapshotOutcome::GenerationFailed);
            }
        };
        self.bus
            .publish_message(&BpmnXml {
                project: project.to_string(),
                yaml_hash: hash.clone(),
                xml: doc.xml.clone(),
            })
            .await?;
        self.store.put_bpmn(project, &doc)?;
        Ok(SnapshotOutcome::Generated)
    }

    /// Stores runs and drops cached metrics of the versions they touch.
    pub fn process_runs(&self, project: &str, runs: &[PipelineRun]) -> Result<()> {
        self.store.put_runs(project, runs)?;
        self.run_batches.fetch_add(1, Ordering::SeqCst);
        let hashes: BTreeSet<&str> = runs.iter().map(|r| r.pipeline_yaml_hash.as_str()).collect();
        let mut cache = self.metrics_cache.lock().unwrap();
        for h in hashes {
            cache.remove(&(project.to_string(), h.to_string()));
        }
        Ok(())
    }

    /// Metrics of one version, computed on first request.
    pub fn metrics(&self, project: &str, yaml_hash: &str) -> Result<VersionMetrics> {
        let key = (project.to_string(), yaml_hash.to_string());
        if let Some(m) = self.metrics_cache.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let model = self.store.model(project, yaml_hash)?;
        let runs: Vec<PipelineRun> = self
            .store
            .runs(project)?
            .into_iter()
            .filter(|r| r.pipeline_yaml_hash == yaml_hash)
            .collect();
        let m = aggregate(&model, &runs)?;
        self.metrics_cache.lock().unwrap().insert(key, m.clone());
        Ok(m)
    }

    pub fn is_metrics_cached(&self, project: &str, yaml_hash: &str) -> bool {
        self.metrics_cache
            .lock()
            .unwrap()
            .contains_key(&(project.to_string(), yaml_hash.to_string()))
    }

    /// Records the project and keeps a client for it. The token stays in
    /// memory only.
    pub fn register(&self, handle: ProjectHandle) -> Result<ProjectHandle> {
        let client = GitLabClient::new(handle.clone())?;
        self.store.put_project(&handle)?;
        self.clients.lock().unwrap().insert(handle.key().to_string(), client);
        Ok(handle)
    }

    /// Re-registers persisted projects, using `token` for all of them.
    pub fn restore_projects(&self, token: Option<&str>) -> Result<usize> {
        let projects = self.store.projects()?;
        for mut h in projects.iter().cloned() {
            if let Some(t) = token {
                h = h.with_token(t);
            }
            let client = GitLabClient::new(h.clone())?;
            self.clients.lock().unwrap().insert(h.key().to_string(), client);
        }
        Ok(projects.len())
    }

    pub fn is_registered(&self, project: &str) -> bool {
        self.clients.lock().unwrap().contains_key(project)
    }

    fn client(&self, project: &str) -> Result<GitLabClient> {
        self.clients
            .lock()
            .unwrap()
            .get(project)
            .cloned()
            .ok_or_else(|| TwinError::UnknownProject(project.to_string()))
    }

    /// Pulls the full history and all runs of `project` through the loop
    /// and waits until they are handled.
    pub async fn sync(&self, project: &str) -> Result<SyncReport> {
        self.sync_with(project, &VersionQuery::default(), None).await
    }

    pub async fn sync_with(&self, project: &str, query: &VersionQuery, run_limit: Option<usize>) -> Result<SyncReport> {
        let client = self.client(project)?;
        let lock = Self::lock_for(&self.sync_locks, &project.to_string());
        let _guard = lock.lock().await;
        let failures_before = self.failures.lock().unwrap().len();

        let snapshots = client.list_config_versions(query).await?;
        let batch = client
            .fetch_runs(&RunFilter {
                limit: run_limit,
                ..Default::default()
            })
            .await?;

        let known: BTreeSet<String> = self.store.versions(project)?.into_iter().map(|v| v.yaml_hash).collect();
        let hashes: BTreeSet<String> = snapshots.iter().map(|s| s.yaml_hash()).collect();
        let mut last = None;
        for s in snapshots.iter().rev() {
            let msg = SnapshotMessage {
                project: project.to_string(),
                snapshot: s.clone(),
            };
            last = Some(self.bus.publish_message(&msg).await?);
        }
        if let Some(seq) = last {
            self.wait_processed(Topic::ConfigSnapshot, seq).await;
        }
        let seq = self
            .bus
            .publish_message(&ExecutionData {
                project: project.to_string(),
                runs: batch.runs.clone(),
            })
            .await?;
        self.wait_processed(Topic::ExecutionData, seq).await;

        if let Some(head) = snapshots.first() {
            self.heads.lock().unwrap().insert(project.to_string(), head.yaml_hash());
        }
        let failures = self.failures.lock().unwrap()[failures_before..]
            .iter()
            .filter(|f| f.project.as_deref() == Some(project))
            .cloned()
            .collect();
        Ok(SyncReport {
            project: project.to_string(),
            snapshots: snapshots.len(),
            versions: hashes.len(),
            new_versions: hashes.difference(&known).count(),
            runs: batch.runs.len(),
            rejected_runs: batch.rejected.iter().map(|e| e.to_string()).collect(),
            failures,
        })
    }

    /// Starts polling `project` for changes, from the newest version sync
    /// has seen. Detected changes are published as ChangeDetection.
    pub fn track(self: &Arc<Self>, project: &str, config: TrackerConfig) -> Result<watch::Receiver<u64>> {
        let client = self.client(project)?;
        let head = self.heads.lock().unwrap().get(project).cloned();
        let mut handle = crate::acquisition::track_changes(client, head, config);
        let polls = handle.polls.clone();
        let twin = Arc::clone(self);
        let name = project.to_string();
        let task = tokio::spawn(async move {
            while let Some(event) = handle.events.recv().await {
                match event {
                    Ok(change) => {
                        if let Err(e) = twin.bus.publish_message(&change).await {
                            tracing::error!(project = %name, "could not publish change: {e}");
                        }
                    }
                    Err(e) => {
                        tracing::error!(project = %name, "change tracking stopped: {e}");
                        break;
                    }
                }
            }
            handle.task.abort();
        });
        if let Some(old) = self.tracking.lock().unwrap().insert(
            project.to_string(),
            Tracking {
                polls: polls.clone(),
                task,
            },
        ) {
            old.task.abort();
        }
        Ok(polls)
    }

    pub fn tracker_polls(&self, project: &str) -> Option<watch::Receiver<u64>> {
        self.tracking.lock().unwrap().get(project).map(|t| t.polls.clone())
    }
}

impl Drop for Twin {
    fn drop(&mut self) {
        self.shutdown();
    }
}
