//! Pipeline to BPMN 2.0 XML with diagram interchange.
//!
//! Stages become lanes, jobs become activities, and same-stage `needs`
//! edges are wired through parallel gateways. Every element id is derived
//! from entity names, so the output is a pure function of the pipeline.

mod layout;
mod plan;
mod xml;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{validate, GraphError, Job, Pipeline, ValidationReport, WhenPolicy};

pub use layout::{layout, Bounds, LayoutConfig, LayoutPlan, Point};
pub use plan::{
    build_structure, plan_gateways, plan_start_events, EventType, FlowNode, GatewayDirection, GatewayPlan, Lane,
    NodeKind, ProcessStructure, SequenceFlow, Slot, StageGateways, StartEventPlan, StartSpec,
};
pub use xml::serialize;

/// A generated BPMN document and the ids needed to address its elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpmnDocument {
    pub xml: String,
    /// Hash of the configuration the document was generated from.
    pub yaml_hash: String,
    /// Job name to activity id.
    pub element_index: BTreeMap<String, String>,
    pub gateway_ids: Vec<String>,
    /// Stage name to lane id.
    pub lane_index: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BpmnError {
    #[error("pipeline is not valid:\n{0}")]
    Invalid(ValidationReport),
    #[error("{kind} names {first:?} and {second:?} both map to element id {id:?}")]
    SanitizationCollision {
        kind: &'static str,
        first: String,
        second: String,
        id: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Generates the BPMN document for a valid pipeline using the default layout.
pub fn generate(pipeline: &Pipeline) -> Result<BpmnDocument, BpmnError> {
    generate_with(pipeline, &LayoutConfig::default())
}

pub fn generate_with(pipeline: &Pipeline, config: &LayoutConfig) -> Result<BpmnDocument, BpmnError> {
    let report = validate(pipeline);
    if !report.is_valid() {
        return Err(BpmnError::Invalid(report));
    }
    let structure = build_structure(pipeline)?;
    let plan = layout(&structure, config);
    let xml = serialize(&structure, &plan);
    for w in &structure.warnings {
        tracing::warn!(yaml_hash = %pipeline.yaml_hash, "{w}");
    }
    Ok(BpmnDocument {
        xml,
        yaml_hash: pipeline.yaml_hash.clone(),
        element_index: structure.element_index.clone(),
        gateway_ids: structure.gateway_ids.clone(),
        lane_index: structure.lane_index.clone(),
        warnings: structure.warnings.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    Task,
    UserTask,
}

impl ActivityKind {
    pub fn element_name(self) -> &'static str {
        match self {
            ActivityKind::Task => "task",
            ActivityKind::UserTask => "userTask",
        }
    }
}

/// How one job is rendered: its activity type and documentation blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Activity {
    pub kind: ActivityKind,
    /// The first entry is always the script joined by newlines. A second
    /// entry lists rules, needs and execution settings when any exist.
    pub documentation: Vec<String>,
}

pub fn map_activity(job: &Job) -> Activity {
    let kind = if job.when == WhenPolicy::Manual {
        ActivityKind::UserTask
    } else {
        ActivityKind::Task
    };
    let mut documentation = vec![job.script.join("\n")];
    let mut meta = Vec::new();
    for c in &job.conditions {
        meta.push(format!("rule {c}"));
    }
    if !job.needs.is_empty() {
        meta.push(format!("needs: {}", job.needs.join(", ")));
    }
    if let Some(image) = &job.image {
        meta.push(format!("image: {image}"));
    }
    if !job.tags.is_empty() {
        meta.push(format!("tags: {}", job.tags.join(", ")));
    }
    if job.allow_failure {
        meta.push("allow_failure: true".to_string());
    }
    if let Some(n) = job.retry {
        meta.push(format!("retry: {n}"));
    }
    if !matches!(job.when, WhenPolicy::OnSuccess | WhenPolicy::Manual) {
        meta.push(format!("when: {}", job.when));
    }
    if !meta.is_empty() {
        documentation.push(meta.join("\n"));
    }
    Activity { kind, documentation }
}

/// Maps an entity name onto the id alphabet: ASCII letters, digits and `_`
/// are kept, everything else becomes `_`.
pub fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect()
}

pub fn task_id(job: &str) -> String {
    format!("task_{}", sanitize(job))
}

pub fn lane_id(stage: &str) -> String {
    format!("lane_{}", sanitize(stage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Condition;

    #[test]
    fn only_manual_maps_to_user_task() {
        for w in WhenPolicy::ALL {
            let mut job = Job::new("j", "s");
            job.when = *w;
            job.script = vec!["a".into(), "b".into()];
            let a = map_activity(&job);
            assert_eq!(a.kind == ActivityKind::UserTask, *w == WhenPolicy::Manual, "{w}");
            assert_eq!(a.documentation[0], "a\nb");
        }
    }

    #[test]
    fn metadata_block_only_when_needed() {
        let mut job = Job::new("j", "s");
        job.script = vec!["x".into()];
        assert_eq!(map_activity(&job).documentation, vec!["x"]);
        job.conditions = vec![Condition::Changes(vec!["src/**".into()])];
        job.retry = Some(2);
        let docs = map_activity(&job).documentation;
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1], "rule changes: [src/**]\nretry: 2");
    }

    #[test]
    fn sanitize_rules() {
        assert_eq!(sanitize("build-image"), "build_image");
        assert_eq!(sanitize("deps:macos"), "deps_macos");
        assert_eq!(sanitize("a b"), "a_b");
        assert_eq!(sanitize("ü"), "_");
        assert_eq!(task_id("unit-test"), "task_unit_test");
        assert_eq!(lane_id("build"), "lane_build");
    }
}
