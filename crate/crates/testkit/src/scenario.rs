//! Scripted end-to-end run of the twin against the mock forge.

use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use pipetwin_twin::acquisition::TrackerConfig;
use pipetwin_twin::bus::Topic;
use pipetwin_twin::{Bus, ProjectHandle, Store, Twin};

use crate::forge::{sha, MockForge, MockJob, MockPipeline};

/// Three distinct contents of the CI file.
pub fn loop_versions() -> [Vec<u8>; 3] {
    let a = crate::fixtures::read_string("java_app.yml");
    let b = a.replace("DEPLOY_ENV: staging", "DEPLOY_ENV: production");
    let c = format!("{b}\nlint:\n  stage: test\n  script: mvn checkstyle:check\n");
    [a.into_bytes(), b.into_bytes(), c.into_bytes()]
}

/// Index into [`loop_versions`] of each of the five replayed commits.
pub const COMMIT_CONTENT: [usize; 5] = [0, 0, 1, 1, 2];

fn commit_time(i: usize) -> DateTime<Utc> {
    crate::runs::epoch() + chrono::Duration::hours(i as i64)
}

/// A successful two-job run at commit `n`.
pub fn simple_run(id: u64, commit: u64, at: DateTime<Utc>) -> MockPipeline {
    let job = |k: u64, name: &str, stage: &str, offset: i64| {
        let start = at + chrono::Duration::seconds(offset);
        MockJob {
            id: id * 10 + k,
            name: name.into(),
            stage: stage.into(),
            status: "success".into(),
            started_at: Some(start.to_rfc3339()),
            finished_at: Some((start + chrono::Duration::seconds(30)).to_rfc3339()),
            duration: Some(30.0),
            queued_duration: Some(0.5),
            failure_reason: None,
        }
    };
    MockPipeline {
        id,
        sha: sha(commit),
        git_ref: "main".into(),
        status: "success".into(),
        source: "push".into(),
        tag: false,
        created_at: at,
        started_at: Some(at),
        finished_at: Some(at + chrono::Duration::seconds(60)),
        duration: Some(60.0),
        queued_duration: Some(1.0),
        jobs: vec![job(0, "compile", "build", 0), job(1, "unit-test", "test", 30)],
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoopReport {
    pub models: usize,
    pub bpmn_entries: usize,
    pub generations: u64,
    /// ChangeDetection envelopes seen on the bus after the initial sync.
    pub change_events: usize,
    /// Generations after the history was replayed twice.
    pub replay_generations: u64,
    pub replay_store_identical: bool,
    pub failures: usize,
    pub elapsed: Duration,
}

impl LoopReport {
    pub fn passed(&self) -> bool {
        self.models == 3
            && self.bpmn_entries == 3
            && self.generations == 3
            && self.change_events == 2
            && self.replay_generations == 3
            && self.replay_store_identical
            && self.failures == 0
    }
}

async fn wait_until(what: &str, timeout: Duration, mut cond: impl AsyncFnMut() -> bool) -> Result<(), String> {
    let end = Instant::now() + timeout;
    loop {
        if cond().await {
            return Ok(());
        }
        if Instant::now() > end {
            return Err(format!("timed out waiting for {what}"));
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

/// Syncs the first commit, then pushes the remaining four one at a time
/// while the twin tracks the project, then replays the whole history.
pub async fn twin_loop(store_path: &std::path::Path) -> Result<LoopReport, String> {
    let started = Instant::now();
    let forge = MockForge::start().await;
    let versions = loop_versions();
    forge.push_commit(&sha(1), commit_time(0), &versions[COMMIT_CONTENT[0]]);
    forge.add_pipeline(simple_run(1, 1, commit_time(0)));

    let store = Arc::new(Store::open(store_path).map_err(|e| e.to_string())?);
    let twin = Twin::start(store.clone(), Bus::new(64)).await;
    let handle = ProjectHandle::new(&forge.api_root(), forge.project_id().to_string()).map_err(|e| e.to_string())?;
    let project = handle.key().to_string();
    twin.register(handle).map_err(|e| e.to_string())?;
    twin.sync(&project).await.map_err(|e| e.to_string())?;

    let mut changes = twin.bus().subscribe(Topic::ChangeDetection).await;
    let config = TrackerConfig {
        poll_interval: Duration::from_millis(10),
        backoff_base: Duration::from_millis(10),
        backoff_cap: Duration::from_millis(50),
    };
    let mut polls = twin.track(&project, config).map_err(|e| e.to_string())?;
    let mut seen = 0usize;

    for (i, content) in COMMIT_CONTENT.iter().enumerate().skip(1) {
        let n = i as u64 + 1;
        forge.push_commit(&sha(n), commit_time(i), &versions[*content]);
        forge.add_pipeline(simple_run(n, n, commit_time(i)));
        // Two completed polls guarantee one that started after the push.
        let target = *polls.borrow() + 2;
        tokio::time::timeout(Duration::from_secs(2), polls.wait_for(|p| *p >= target))
            .await
            .map_err(|_| format!("tracker stalled at commit {n}"))?
            .map_err(|e| e.to_string())?;
        let changed = *content != COMMIT_CONTENT[i - 1];
        if changed {
            let env = tokio::time::timeout(Duration::from_secs(2), changes.recv())
                .await
                .map_err(|_| format!("no change event for commit {n}"))?
                .ok_or("bus closed")?;
            seen += 1;
            twin.wait_processed(Topic::ChangeDetection, env.sequence).await;
        }
        while let Some(_extra) = changes.try_recv() {
            seen += 1;
        }
    }
    // Let a few more polls pass to catch late duplicates.
    let target = *polls.borrow() + 3;
    let _ = tokio::time::timeout(Duration::from_secs(2), polls.wait_for(|p| *p >= target)).await;
    while let Some(_extra) = changes.try_recv() {
        seen += 1;
    }

    let versions = store.versions(&project).map_err(|e| e.to_string())?;
    let models = versions
        .iter()
        .filter(|v| store.model(&project, &v.yaml_hash).is_ok())
        .count();
    let bpmn_entries = versions
        .iter()
        .filter(|v| store.bpmn(&project, &v.yaml_hash).is_ok())
        .count();
    let generations = twin.generations();
    wait_until("tracked head", Duration::from_secs(1), async || {
        twin.status().change_events as usize == seen
    })
    .await?;

    // Replay the full history, picking up the runs of the tracked commits,
    // then replay it again and compare.
    twin.sync(&project).await.map_err(|e| e.to_string())?;
    let before = store.to_bytes();
    twin.sync(&project).await.map_err(|e| e.to_string())?;
    let after = store.to_bytes();
    let failures = twin.failures().len();
    twin.shutdown();

    Ok(LoopReport {
        models,
        bpmn_entries,
        generations,
        change_events: seen,
        replay_generations: twin.generations(),
        replay_store_identical: before == after,
        failures,
        elapsed: started.elapsed(),
    })
}
