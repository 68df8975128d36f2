//! Execution metrics per structural version, cross-version deltas, failure
//! categories and per-run overlays.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bpmn::BpmnDocument;
use crate::model::{ExecutionStatus, JobRun, Pipeline, PipelineRun};

pub const METRICS_SCHEMA: &str = "pipetwin.metrics/1";

/// Failure reasons attributed to the execution environment.
pub const INFRASTRUCTURE_REASONS: &[&str] = &[
    "runner_system_failure",
    "stuck_or_timeout_failure",
    "api_failure",
    "scheduler_failure",
    "data_integrity_failure",
    "runner_unsupported",
];

pub const SCRIPT_REASON: &str = "script_failure";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    Infrastructure,
    Script,
    Other,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 3] = [
        FailureCategory::Infrastructure,
        FailureCategory::Script,
        FailureCategory::Other,
    ];
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("job {job:?} has status {status}, not failed")]
    NotAFailure { job: String, status: ExecutionStatus },
    #[error("run {run_id} belongs to {found}, expected {expected}")]
    HashMismatch {
        run_id: u64,
        expected: String,
        found: String,
    },
    #[error("job {job:?} has no element in the document")]
    MissingElement { job: String },
}

pub fn categorize(job_run: &JobRun) -> Result<FailureCategory, AnalyticsError> {
    if job_run.status != ExecutionStatus::Failed {
        return Err(AnalyticsError::NotAFailure {
            job: job_run.job_name.clone(),
            status: job_run.status,
        });
    }
    Ok(match job_run.failure_reason.as_deref() {
        Some(SCRIPT_REASON) => FailureCategory::Script,
        Some(r) if INFRASTRUCTURE_REASONS.contains(&r) => FailureCategory::Infrastructure,
        _ => FailureCategory::Other,
    })
}

/// Rounds to one decimal, ties to even. Values within 1e-9 of a tie are
/// treated as ties so that binary representation error does not decide the
/// direction.
pub fn round_half_even_1dp(value: f64) -> f64 {
    let scaled = value * 10.0;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let rounded = if (frac - 0.5).abs() < 1e-9 {
        if floor.rem_euclid(2.0) == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    };
    let out = rounded / 10.0;
    if out == 0.0 {
        0.0
    } else {
        out
    }
}

/// `100 * num / den` rounded half-to-even at one decimal, in exact integer
/// arithmetic.
pub fn percentage_1dp(num: u64, den: u64) -> f64 {
    assert!(den > 0, "percentage of an empty population");
    let scaled = 1000 * num as u128;
    let (q, r) = (scaled / den as u128, scaled % den as u128);
    let twice = 2 * r;
    let tenths = if twice > den as u128 || (twice == den as u128 && q % 2 == 1) {
        q + 1
    } else {
        q
    };
    tenths as f64 / 10.0
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(round_ms(values.iter().sum::<f64>() / values.len() as f64))
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        round_ms((v[n / 2 - 1] + v[n / 2]) / 2.0)
    })
}

/// Aggregated seconds are reported at millisecond resolution.
fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Aggregated execution metrics of one structural version. Statistics are
/// `None` when there is nothing to aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionMetrics {
    pub schema: String,
    pub yaml_hash: String,
    pub jobs: usize,
    pub runs: usize,
    pub success_rate_pct: Option<f64>,
    /// Over finished runs (pipeline level).
    pub avg_duration_s: Option<f64>,
    pub median_duration_s: Option<f64>,
    /// Mean job duration per model stage.
    pub stage_avg_s: BTreeMap<String, f64>,
    /// Mean job queue time.
    pub avg_queue_s: Option<f64>,
    pub failure_categories: BTreeMap<FailureCategory, usize>,
}

impl VersionMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialization is infallible")
    }
}

/// Aggregates the runs of `pipeline`'s version. Job runs naming jobs that
/// the model does not define count towards queue time and failures but not
/// towards any stage.
pub fn aggregate(pipeline: &Pipeline, runs: &[PipelineRun]) -> Result<VersionMetrics, AnalyticsError> {
    if let Some(r) = runs.iter().find(|r| r.pipeline_yaml_hash != pipeline.yaml_hash) {
        return Err(AnalyticsError::HashMismatch {
            run_id: r.run_id,
            expected: pipeline.yaml_hash.clone(),
            found: r.pipeline_yaml_hash.clone(),
        });
    }
    let successes = runs.iter().filter(|r| r.status == ExecutionStatus::Success).count();
    let durations: Vec<f64> = runs.iter().filter_map(|r| r.duration_s).collect();

    let mut per_stage: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut queues = Vec::new();
    let mut failure_categories: BTreeMap<FailureCategory, usize> =
        FailureCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for job_run in runs.iter().flat_map(|r| &r.job_runs) {
        if let (Some(d), Some(job)) = (job_run.duration_s, pipeline.job(&job_run.job_name)) {
            per_stage.entry(job.stage.as_str()).or_default().push(d);
        }
        if let Some(q) = job_run.queued_s {
            queues.push(q);
        }
        if let Ok(c) = categorize(job_run) {
            *failure_categories.entry(c).or_default() += 1;
        }
    }

    Ok(VersionMetrics {
        schema: METRICS_SCHEMA.to_string(),
        yaml_hash: pipeline.yaml_hash.clone(),
        jobs: pipeline.jobs.len(),
        runs: runs.len(),
        success_rate_pct: (!runs.is_empty()).then(|| percentage_1dp(successes as u64, runs.len() as u64)),
        avg_duration_s: mean(&durations),
        median_duration_s: median(&durations),
        stage_avg_s: per_stage
            .into_iter()
            .filter_map(|(s, v)| Some((s.to_string(), mean(&v)?)))
            .collect(),
        avg_queue_s: mean(&queues),
        failure_categories,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaUnit {
    /// Absolute difference of counts.
    Count,
    /// Difference of percentages, in percentage points.
    PercentagePoints,
    /// Relative change `100 * (after / before - 1)`.
    Percent,
}

/// One comparison row. `delta` is `None` when the comparison is not
/// meaningful (run counts) or undefined (zero or missing base).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub before: Option<f64>,
    pub after: Option<f64>,
    pub delta: Option<f64>,
    pub unit: DeltaUnit,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub schema: String,
    pub from_hash: String,
    pub to_hash: String,
    pub rows: Vec<DeltaRow>,
}

impl MetricsDelta {
    pub fn row(&self, metric: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

/// Computes a delta value from its inputs. Used both to build rows and to
/// re-check them.
pub fn delta_value(unit: DeltaUnit, before: Option<f64>, after: Option<f64>) -> Option<f64> {
    let (b, a) = (before?, after?);
    match unit {
        DeltaUnit::Count => Some(a - b),
        DeltaUnit::PercentagePoints => Some(round_half_even_1dp(a - b)),
        DeltaUnit::Percent => (b != 0.0).then(|| round_half_even_1dp(100.0 * (a / b - 1.0))),
    }
}

/// Text form of a delta: `+29.8 pp`, `-26.2%`, `+2`. Relative changes of
/// 1000% or more drop the decimal.
pub fn format_delta(unit: DeltaUnit, delta: Option<f64>) -> String {
    let Some(d) = delta else {
        return "n/a".to_string();
    };
    match unit {
        DeltaUnit::Count => format!("{:+}", d.round() as i64),
        DeltaUnit::PercentagePoints => format!("{} pp", signed_1dp(d)),
        DeltaUnit::Percent if d.abs() >= 1000.0 => format!("{:+}%", d.round() as i64),
        DeltaUnit::Percent => format!("{}%", signed_1dp(d)),
    }
}

fn signed_1dp(d: f64) -> String {
    if d < 0.0 {
        format!("-{:.1}", -d)
    } else {
        format!("+{d:.1}")
    }
}

fn make_row(metric: impl Into<String>, unit: DeltaUnit, before: Option<f64>, after: Option<f64>) -> DeltaRow {
    let delta = delta_value(unit, before, after);
    DeltaRow {
        metric: metric.into(),
        before,
        after,
        delta,
        unit,
        display: format_delta(unit, delta),
    }
}

/// Row names of stage averages.
pub fn stage_metric(stage: &str) -> String {
    format!("stage_avg_s.{stage}")
}

pub fn delta(m1: &VersionMetrics, m2: &VersionMetrics) -> MetricsDelta {
    let mut rows = vec![
        make_row("jobs", DeltaUnit::Count, Some(m1.jobs as f64), Some(m2.jobs as f64)),
        DeltaRow {
            metric: "runs".into(),
            before: Some(m1.runs as f64),
            after: Some(m2.runs as f64),
            delta: None,
            unit: DeltaUnit::Count,
            display: format_delta(DeltaUnit::Count, None),
        },
        make_row(
            "success_rate_pct",
            DeltaUnit::PercentagePoints,
            m1.success_rate_pct,
            m2.success_rate_pct,
        ),
        make_row(
            "avg_duration_s",
            DeltaUnit::Percent,
            m1.avg_duration_s,
            m2.avg_duration_s,
        ),
        make_row(
            "median_duration_s",
            DeltaUnit::Percent,
            m1.median_duration_s,
            m2.median_duration_s,
        ),
    ];
    let mut stages: Vec<&String> = m1.stage_avg_s.keys().chain(m2.stage_avg_s.keys()).collect();
    stages.sort();
    stages.dedup();
    for s in stages {
        rows.push(make_row(
            stage_metric(s),
            DeltaUnit::Percent,
            m1.stage_avg_s.get(s).copied(),
            m2.stage_avg_s.get(s).copied(),
        ));
    }
    rows.push(make_row(
        "avg_queue_s",
        DeltaUnit::Percent,
        m1.avg_queue_s,
        m2.avg_queue_s,
    ));
    MetricsDelta {
        schema: METRICS_SCHEMA.to_string(),
        from_hash: m1.yaml_hash.clone(),
        to_hash: m2.yaml_hash.clone(),
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementExecution {
    pub job_name: String,
    pub status: ExecutionStatus,
    pub duration_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// Runtime annotations for one run, keyed by activity id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOverlay {
    pub run_id: u64,
    pub yaml_hash: String,
    pub status: ExecutionStatus,
    pub elements: BTreeMap<String, ElementExecution>,
}

impl fmt::Display for ExecutionOverlay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run {} ({})", self.run_id, self.status)?;
        for (id, e) in &self.elements {
            write!(f, "\n{id}: {}", e.status)?;
            if let Some(d) = e.duration_s {
                write!(f, " {d}s")?;
            }
            if let Some(r) = &e.failure_reason {
                write!(f, " [{r}]")?;
            }
        }
        Ok(())
    }
}

/// Maps a run onto its version's diagram. Defined jobs the run did not
/// execute are marked skipped. When a job ran more than once (retries) the
/// last entry wins.
pub fn overlay(run: &PipelineRun, doc: &BpmnDocument) -> Result<ExecutionOverlay, AnalyticsError> {
    if run.pipeline_yaml_hash != doc.yaml_hash {
        return Err(AnalyticsError::HashMismatch {
            run_id: run.run_id,
            expected: doc.yaml_hash.clone(),
            found: run.pipeline_yaml_hash.clone(),
        });
    }
    let mut elements = BTreeMap::new();
    for job_run in &run.job_runs {
        let id = doc
            .element_index
            .get(&job_run.job_name)
            .ok_or_else(|| AnalyticsError::MissingElement {
                job: job_run.job_name.clone(),
            })?;
        elements.insert(
            id.clone(),
            ElementExecution {
                job_name: job_run.job_name.clone(),
                status: job_run.status,
                duration_s: job_run.duration_s,
                failure_reason: job_run.failure_reason.clone(),
            },
        );
    }
    for (job, id) in &doc.element_index {
        elements.entry(id.clone()).or_insert_with(|| ElementExecution {
            job_name: job.clone(),
            status: ExecutionStatus::Skipped,
            duration_s: None,
            failure_reason: None,
        });
    }
    Ok(ExecutionOverlay {
        run_id: run.run_id,
        yaml_hash: run.pipeline_yaml_hash.clone(),
        status: run.status,
        elements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentage_rounds_half_to_even() {
        assert_eq!(percentage_1dp(5, 16), 31.2);
        assert_eq!(percentage_1dp(61, 100), 61.0);
        assert_eq!(percentage_1dp(0, 3), 0.0);
        assert_eq!(percentage_1dp(3, 3), 100.0);
        // 1/16 = 6.25 -> 6.2, 3/16 = 18.75 -> 18.8
        assert_eq!(percentage_1dp(1, 16), 6.2);
        assert_eq!(percentage_1dp(3, 16), 18.8);
        assert_eq!(percentage_1dp(2, 3), 66.7);
    }

    #[test]
    fn float_rounding() {
        assert_eq!(round_half_even_1dp(0.25), 0.2);
        assert_eq!(round_half_even_1dp(0.35), 0.4);
        assert_eq!(round_half_even_1dp(-1.04), -1.0);
        assert_eq!(round_half_even_1dp(61.0 - 31.2), 29.8);
        assert_eq!(round_half_even_1dp(-0.04), 0.0);
    }

    #[test]
    fn delta_rows_from_inkscape_aggregates() {
        let cases = [
            (DeltaUnit::PercentagePoints, 31.2, 61.0, "+29.8 pp"),
            (DeltaUnit::Percent, 2550.0, 2709.0, "+6.2%"),
            (DeltaUnit::Percent, 2795.0, 2766.0, "-1.0%"),
            (DeltaUnit::Percent, 614.0, 453.0, "-26.2%"),
            (DeltaUnit::Percent, 3.1, 50.2, "+1519%"),
            (DeltaUnit::Count, 15.0, 17.0, "+2"),
        ];
        for (unit, b, a, text) in cases {
            assert_eq!(format_delta(unit, delta_value(unit, Some(b), Some(a))), text);
        }
    }

    #[test]
    fn zero_base_is_undefined() {
        assert_eq!(delta_value(DeltaUnit::Percent, Some(0.0), Some(5.0)), None);
        assert_eq!(format_delta(DeltaUnit::Percent, None), "n/a");
    }

    #[test]
    fn median_of_even_length_is_midpoint_mean() {
        assert_eq!(median(&[10.0, 20.0, 30.0, 100.0]), Some(25.0));
        assert_eq!(mean(&[10.0, 20.0, 30.0, 100.0]), Some(40.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn categorize_table() {
        let mut jr = JobRun {
            job_name: "j".into(),
            status: ExecutionStatus::Failed,
            started_at: None,
            finished_at: None,
            duration_s: None,
            queued_s: None,
            failure_reason: Some(SCRIPT_REASON.into()),
        };
        assert_eq!(categorize(&jr).unwrap(), FailureCategory::Script);
        for r in INFRASTRUCTURE_REASONS {
            jr.failure_reason = Some(r.to_string());
            assert_eq!(categorize(&jr).unwrap(), FailureCategory::Infrastructure, "{r}");
        }
        jr.failure_reason = Some("mystery".into());
        assert_eq!(categorize(&jr).unwrap(), FailureCategory::Other);
        jr.failure_reason = None;
        assert_eq!(categorize(&jr).unwrap(), FailureCategory::Other);
        jr.status = ExecutionStatus::Success;
        assert!(matches!(categorize(&jr), Err(AnalyticsError::NotAFailure { .. })));
    }
}
