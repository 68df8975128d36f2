//! The pipeline metamodel: a definition facet (what a configuration
//! prescribes) and an execution facet (what a run produced).
//!
//! All values are plain data. They are immutable once built by the parser or
//! the acquisition layer and may be shared freely between threads.

mod graph;
mod validate;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use graph::{needs_graph, GraphError, NeedsGraph};
pub use validate::{validate, Rule, ValidationReport, Violation};

/// Schema identifier of the canonical model JSON document.
pub const MODEL_SCHEMA: &str = "pipetwin.model/1";

/// Stage a job lands in when its definition names none.
pub const DEFAULT_STAGE: &str = "test";

/// SHA-256 of the raw configuration bytes as 64 lowercase hex characters.
///
/// This is the identity of a structural version: two commits carrying the
/// same bytes share one version.
pub fn compute_yaml_hash(raw: &[u8]) -> String {
    hex::encode(Sha256::digest(raw))
}

/// One structural version of a CI configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    #[serde(rename = "ref")]
    pub git_ref: String,
    pub commit_sha: String,
    pub file_path: String,
    pub yaml_hash: String,
    pub stage_order: Vec<String>,
    pub jobs: Vec<Job>,
    pub templates: Vec<Template>,
    pub variables: Vec<Variable>,
    pub triggers: Vec<Trigger>,
}

impl Pipeline {
    pub fn job(&self, name: &str) -> Option<&Job> {
        self.jobs.iter().find(|j| j.name == name)
    }

    pub fn template(&self, name: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.name == name)
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stage_order.iter().position(|s| s == name)
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.stage_order
            .iter()
            .enumerate()
            .map(|(index, name)| Stage {
                name: name.clone(),
                index,
            })
            .collect()
    }

    /// Jobs assigned to `stage`, in model order.
    pub fn jobs_in_stage<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a Job> + 'a {
        self.jobs.iter().filter(move |j| j.stage == stage)
    }

    pub fn trigger_types(&self) -> Vec<TriggerType> {
        self.triggers.iter().map(|t| t.trigger_type).collect()
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            schema: MODEL_SCHEMA.to_string(),
            pipeline: self.clone(),
        }
    }
}

/// The versioned JSON envelope used by storage and the HTTP API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema: String,
    pub pipeline: Pipeline,
}

impl ModelDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| SchemaError::Malformed(e.to_string()))?;
        if doc.schema != MODEL_SCHEMA {
            return Err(SchemaError::WrongSchema {
                expected: MODEL_SCHEMA,
                found: doc.schema,
            });
        }
        Ok(doc)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("expected schema {expected}, found {found}")]
    WrongSchema { expected: &'static str, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub name: String,
    pub stage: String,
    pub script: Vec<String>,
    pub image: Option<String>,
    pub when: WhenPolicy,
    pub allow_failure: bool,
    pub needs: Vec<String>,
    pub conditions: Vec<Condition>,
    pub variables: Vec<Variable>,
    pub tags: Vec<String>,
    pub retry: Option<u32>,
}

impl Job {
    /// A job with every optional attribute at its platform default.
    pub fn new(name: impl Into<String>, stage: impl Into<String>) -> Self {
        Job {
            name: name.into(),
            stage: stage.into(),
            script: Vec::new(),
            image: None,
            when: WhenPolicy::OnSuccess,
            allow_failure: false,
            needs: Vec::new(),
            conditions: Vec::new(),
            variables: Vec::new(),
            tags: Vec::new(),
            retry: None,
        }
    }
}

/// A hidden (`.`-prefixed) job definition, kept as written so that template
/// edits show up in version comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub body: TemplateBody,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateBody {
    pub stage: Option<String>,
    pub script: Option<Vec<String>>,
    pub image: Option<String>,
    pub when: Option<WhenPolicy>,
    pub allow_failure: Option<bool>,
    pub needs: Option<Vec<String>>,
    pub conditions: Option<Vec<Condition>>,
    pub variables: Option<Vec<Variable>>,
    pub tags: Option<Vec<String>>,
    pub retry: Option<u32>,
    pub extends: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableScope {
    Pipeline,
    Job,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub key: String,
    pub value: String,
    pub scope: VariableScope,
}

/// A rule predicate attached to a job. Conditions are metadata: they never
/// remove a job from the structural model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "expression", rename_all = "snake_case")]
pub enum Condition {
    If(String),
    Changes(Vec<String>),
    Exists(Vec<String>),
}

impl Condition {
    pub fn kind(&self) -> &'static str {
        match self {
            Condition::If(_) => "if",
            Condition::Changes(_) => "changes",
            Condition::Exists(_) => "exists",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::If(expr) => write!(f, "if: {expr}"),
            Condition::Changes(paths) => write!(f, "changes: [{}]", paths.join(", ")),
            Condition::Exists(paths) => write!(f, "exists: [{}]", paths.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trigger {
    pub trigger_type: TriggerType,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} value {value:?}")]
pub struct UnknownVariant {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = UnknownVariant;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(UnknownVariant { kind: $kind, value: other.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_enum!(
    /// Activation policy of a job.
    WhenPolicy, "when" {
        OnSuccess => "on_success",
        Manual => "manual",
        Always => "always",
        OnFailure => "on_failure",
        Delayed => "delayed",
    }
);

closed_enum!(
    /// Event source that initiates a pipeline.
    TriggerType, "trigger type" {
        Push => "push",
        MergeRequest => "merge_request",
        Schedule => "schedule",
        Api => "api",
        Web => "web",
        TagPush => "tag_push",
    }
);

closed_enum!(
    /// Outcome states reported by the CI engine.
    ExecutionStatus, "execution status" {
        Success => "success",
        Failed => "failed",
        Canceled => "canceled",
        Skipped => "skipped",
        Running => "running",
        Pending => "pending",
        Manual => "manual",
    }
);

// The variants come from the macro, so `#[default]` cannot be attached.
#[allow(clippy::derivable_impls)]
impl Default for WhenPolicy {
    fn default() -> Self {
        WhenPolicy::OnSuccess
    }
}

/// One execution of a pipeline, linked to its structural version by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: u64,
    pub pipeline_yaml_hash: String,
    pub status: ExecutionStatus,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    /// `None` while the run has not finished.
    pub duration_s: Option<f64>,
    pub source: TriggerType,
    pub job_runs: Vec<JobRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRun {
    pub job_name: String,
    pub status: ExecutionStatus,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub duration_s: Option<f64>,
    pub queued_s: Option<f64>,
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunInvariantError {
    #[error("{entity}: finished_at precedes started_at")]
    FinishedBeforeStart { entity: String },
    #[error("{entity}: negative {field} ({value})")]
    Negative {
        entity: String,
        field: &'static str,
        value: f64,
    },
    #[error("{entity}: failure_reason present on a {status} job")]
    StrayFailureReason { entity: String, status: ExecutionStatus },
}

impl PipelineRun {
    /// Checks the execution-facet invariants on the run and all its jobs.
    pub fn check(&self) -> Result<(), RunInvariantError> {
        let entity = format!("run {}", self.run_id);
        check_times(&entity, self.started_at, self.finished_at)?;
        check_non_negative(&entity, "duration_s", self.duration_s)?;
        for job in &self.job_runs {
            job.check()?;
        }
        Ok(())
    }
}

impl JobRun {
    pub fn check(&self) -> Result<(), RunInvariantError> {
        let entity = format!("job {}", self.job_name);
        check_times(&entity, self.started_at, self.finished_at)?;
        check_non_negative(&entity, "duration_s", self.duration_s)?;
        check_non_negative(&entity, "queued_s", self.queued_s)?;
        if self.failure_reason.is_some() && self.status != ExecutionStatus::Failed {
            return Err(RunInvariantError::StrayFailureReason {
                entity,
                status: self.status,
            });
        }
        Ok(())
    }
}

fn check_times(
    entity: &str,
    started: Option<DateTime<Utc>>,
    finished: Option<DateTime<Utc>>,
) -> Result<(), RunInvariantError> {
    match (started, finished) {
        (Some(s), Some(f)) if f < s => Err(RunInvariantError::FinishedBeforeStart {
            entity: entity.to_string(),
        }),
        _ => Ok(()),
    }
}

fn check_non_negative(entity: &str, field: &'static str, value: Option<f64>) -> Result<(), RunInvariantError> {
    match value {
        Some(v) if v < 0.0 || v.is_nan() => Err(RunInvariantError::Negative {
            entity: entity.to_string(),
            field,
            value: v,
        }),
        _ => Ok(()),
    }
}
