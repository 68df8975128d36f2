//! Constructed run histories whose aggregates are known in advance.

use chrono::{DateTime, Duration, TimeZone, Utc};
use pipetwin_core::model::{ExecutionStatus, JobRun, TriggerType};
use pipetwin_core::{Pipeline, PipelineRun};

/// Shape of a run history for one version.
#[derive(Debug, Clone)]
pub struct RunProfile {
    pub success: usize,
    pub failed: usize,
    pub canceled: usize,
    /// `(count, seconds)` pipeline durations, assigned to runs in order.
    pub durations: Vec<(usize, f64)>,
    /// `(count, reason)` for the failed runs, in order.
    pub failure_reasons: Vec<(usize, &'static str)>,
    /// Duration of every job run in the stage named by `timed_stage`.
    pub stage_job_s: f64,
    pub timed_stage: &'static str,
    /// Queue time of every job run that left the queue.
    pub queue_s: f64,
    /// Duration of job runs in other stages.
    pub other_job_s: f64,
}

impl RunProfile {
    pub fn runs(&self) -> usize {
        self.success + self.failed + self.canceled
    }
}

/// 16 runs: 5 successful, 10 failed (5 infrastructure, 5 script), 1
/// canceled; mean duration 2550 s, build jobs 614 s, queue 3.1 s.
pub fn v1_profile() -> RunProfile {
    RunProfile {
        success: 5,
        failed: 10,
        canceled: 1,
        durations: vec![(7, 2235.0), (9, 2795.0)],
        failure_reasons: vec![
            (3, "runner_system_failure"),
            (2, "stuck_or_timeout_failure"),
            (5, "script_failure"),
        ],
        stage_job_s: 614.0,
        timed_stage: "build",
        queue_s: 3.1,
        other_job_s: 240.0,
    }
}

/// 100 runs: 61 successful, 21 failed (19 script, 2 runner system), 18
/// canceled; mean duration 2709 s, build jobs 453 s, queue 50.2 s.
pub fn v2_profile() -> RunProfile {
    RunProfile {
        success: 61,
        failed: 21,
        canceled: 18,
        durations: vec![(48, 2650.0), (1, 2634.0), (51, 2766.0)],
        failure_reasons: vec![(19, "script_failure"), (2, "runner_system_failure")],
        stage_job_s: 453.0,
        timed_stage: "build",
        queue_s: 50.2,
        other_job_s: 240.0,
    }
}

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 8, 0, 0).unwrap()
}

fn expand<T: Clone>(groups: &[(usize, T)]) -> Vec<T> {
    groups
        .iter()
        .flat_map(|(n, v)| std::iter::repeat_n(v.clone(), *n))
        .collect()
}

/// Builds the runs of `profile` against `pipeline`. Run ids start at
/// `first_id`; run `i` starts `i` hours after [`epoch`] plus `offset_h`.
///
/// A failed run fails its first job in the timed stage and skips every job
/// in later stages. A canceled run cancels every job before it starts.
pub fn build_runs(pipeline: &Pipeline, profile: &RunProfile, first_id: u64, offset_h: i64) -> Vec<PipelineRun> {
    let n = profile.runs();
    let durations = expand(&profile.durations);
    let reasons = expand(&profile.failure_reasons);
    assert_eq!(durations.len(), n, "duration groups must cover every run");
    assert_eq!(
        reasons.len(),
        profile.failed,
        "failure reasons must cover every failed run"
    );
    let timed_index = pipeline
        .stage_index(profile.timed_stage)
        .unwrap_or_else(|| panic!("pipeline has no {} stage", profile.timed_stage));
    let failing_job = pipeline
        .jobs_in_stage(profile.timed_stage)
        .next()
        .map(|j| j.name.clone())
        .expect("timed stage has a job");

    (0..n)
        .map(|i| {
            let status = if i < profile.success {
                ExecutionStatus::Success
            } else if i < profile.success + profile.failed {
                ExecutionStatus::Failed
            } else {
                ExecutionStatus::Canceled
            };
            let started = epoch() + Duration::hours(offset_h + i as i64);
            let duration = durations[i];
            let job_runs = pipeline
                .jobs
                .iter()
                .map(|job| {
                    let stage_index = pipeline.stage_index(&job.stage).unwrap();
                    let job_s = if job.stage == profile.timed_stage {
                        profile.stage_job_s
                    } else {
                        profile.other_job_s
                    };
                    let job_status = match status {
                        ExecutionStatus::Canceled => ExecutionStatus::Canceled,
                        ExecutionStatus::Failed if job.name == failing_job => ExecutionStatus::Failed,
                        ExecutionStatus::Failed if stage_index > timed_index => ExecutionStatus::Skipped,
                        _ => ExecutionStatus::Success,
                    };
                    let ran = matches!(job_status, ExecutionStatus::Success | ExecutionStatus::Failed);
                    let job_start = started + Duration::seconds(5);
                    JobRun {
                        job_name: job.name.clone(),
                        status: job_status,
                        started_at: ran.then_some(job_start),
                        finished_at: ran.then(|| job_start + Duration::milliseconds((job_s * 1000.0) as i64)),
                        duration_s: ran.then_some(job_s),
                        queued_s: ran.then_some(profile.queue_s),
                        failure_reason: (job_status == ExecutionStatus::Failed)
                            .then(|| reasons[i - profile.success].to_string()),
                    }
                })
                .collect();
            PipelineRun {
                run_id: first_id + i as u64,
                pipeline_yaml_hash: pipeline.yaml_hash.clone(),
                status,
                started_at: Some(started),
                finished_at: Some(started + Duration::seconds(duration as i64)),
                duration_s: Some(duration),
                source: TriggerType::Push,
                job_runs,
            }
        })
        .collect()
}
