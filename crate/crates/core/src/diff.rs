//! Structural comparison of two pipeline versions.
//!
//! Entities are matched by name. Anything present on one side only is added
//! or removed; shared entities are compared field by field. There is no
//! rename detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bpmn::BpmnDocument;
use crate::model::{Job, Pipeline, TemplateBody, TriggerType, Variable};

pub const DIFF_SCHEMA: &str = "pipetwin.diff/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Stage,
    Image,
    Needs,
    Conditions,
    When,
    Script,
    Variables,
    AllowFailure,
    Tags,
    Retry,
    /// Templates only.
    Extends,
}

impl Field {
    pub const JOB_FIELDS: [Field; 10] = [
        Field::Stage,
        Field::Image,
        Field::Needs,
        Field::Conditions,
        Field::When,
        Field::Script,
        Field::Variables,
        Field::AllowFailure,
        Field::Tags,
        Field::Retry,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Stage => "stage",
            Field::Image => "image",
            Field::Needs => "needs",
            Field::Conditions => "conditions",
            Field::When => "when",
            Field::Script => "script",
            Field::Variables => "variables",
            Field::AllowFailure => "allow_failure",
            Field::Tags => "tags",
            Field::Retry => "retry",
            Field::Extends => "extends",
        }
    }

    /// Fields whose list values are compared ignoring order.
    pub fn is_set_valued(self) -> bool {
        matches!(self, Field::Needs | Field::Tags)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One changed field with both values in canonical model JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: Field,
    pub before: Value,
    pub after: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDelta {
    pub name: String,
    pub field_changes: Vec<FieldChange>,
}

impl JobDelta {
    pub fn fields(&self) -> Vec<Field> {
        self.field_changes.iter().map(|c| c.field).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueChange {
    pub key: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableChanges {
    pub added: Vec<Variable>,
    pub removed: Vec<Variable>,
    pub modified: Vec<ValueChange>,
}

impl VariableChanges {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerChanges {
    pub added: Vec<TriggerType>,
    pub removed: Vec<TriggerType>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountDeltas {
    pub stages_before: i64,
    pub stages_after: i64,
    pub stages_delta: i64,
    pub jobs_before: i64,
    pub jobs_after: i64,
    pub jobs_delta: i64,
}

impl CountDeltas {
    fn new(before: &Pipeline, after: &Pipeline) -> Self {
        let (sb, sa) = (before.stage_order.len() as i64, after.stage_order.len() as i64);
        let (jb, ja) = (before.jobs.len() as i64, after.jobs.len() as i64);
        CountDeltas {
            stages_before: sb,
            stages_after: sa,
            stages_delta: sa - sb,
            jobs_before: jb,
            jobs_after: ja,
            jobs_delta: ja - jb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralDiff {
    pub schema: String,
    pub from_hash: String,
    pub to_hash: String,
    pub added_jobs: Vec<String>,
    pub removed_jobs: Vec<String>,
    pub modified_jobs: Vec<JobDelta>,
    pub added_templates: Vec<String>,
    pub removed_templates: Vec<String>,
    pub modified_templates: Vec<JobDelta>,
    pub added_stages: Vec<String>,
    pub removed_stages: Vec<String>,
    /// Same stage set, different order.
    pub stage_order_changed: bool,
    pub variable_changes: VariableChanges,
    pub trigger_changes: TriggerChanges,
    pub summary: CountDeltas,
}

impl StructuralDiff {
    /// No structural difference at all. Count deltas follow from the lists.
    pub fn is_empty(&self) -> bool {
        self.added_jobs.is_empty()
            && self.removed_jobs.is_empty()
            && self.modified_jobs.is_empty()
            && self.added_templates.is_empty()
            && self.removed_templates.is_empty()
            && self.modified_templates.is_empty()
            && self.added_stages.is_empty()
            && self.removed_stages.is_empty()
            && !self.stage_order_changed
            && self.variable_changes.is_empty()
            && self.trigger_changes.added.is_empty()
            && self.trigger_changes.removed.is_empty()
    }

    pub fn modified_job(&self, name: &str) -> Option<&JobDelta> {
        self.modified_jobs.iter().find(|d| d.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diff serialization is infallible")
    }

    /// The swapped comparison, derived without recomputation.
    pub fn reversed(&self) -> StructuralDiff {
        let swap = |deltas: &[JobDelta]| {
            deltas
                .iter()
                .map(|d| JobDelta {
                    name: d.name.clone(),
                    field_changes: d
                        .field_changes
                        .iter()
                        .map(|c| FieldChange {
                            field: c.field,
                            before: c.after.clone(),
                            after: c.before.clone(),
                        })
                        .collect(),
                })
                .collect()
        };
        let s = self.summary;
        StructuralDiff {
            schema: self.schema.clone(),
            from_hash: self.to_hash.clone(),
            to_hash: self.from_hash.clone(),
            added_jobs: self.removed_jobs.clone(),
            removed_jobs: self.added_jobs.clone(),
            modified_jobs: swap(&self.modified_jobs),
            added_templates: self.removed_templates.clone(),
            removed_templates: self.added_templates.clone(),
            modified_templates: swap(&self.modified_templates),
            added_stages: self.removed_stages.clone(),
            removed_stages: self.added_stages.clone(),
            stage_order_changed: self.stage_order_changed,
            variable_changes: VariableChanges {
                added: self.variable_changes.removed.clone(),
                removed: self.variable_changes.added.clone(),
                modified: self
                    .variable_changes
                    .modified
                    .iter()
                    .map(|c| ValueChange {
                        key: c.key.clone(),
                        before: c.after.clone(),
                        after: c.before.clone(),
                    })
                    .collect(),
            },
            trigger_changes: TriggerChanges {
                added: self.trigger_changes.removed.clone(),
                removed: self.trigger_changes.added.clone(),
            },
            summary: CountDeltas {
                stages_before: s.stages_after,
                stages_after: s.stages_before,
                stages_delta: -s.stages_delta,
                jobs_before: s.jobs_after,
                jobs_after: s.jobs_before,
                jobs_delta: -s.jobs_delta,
            },
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("model values serialize")
}

fn name_diff<'a>(before: &BTreeSet<&'a str>, after: &BTreeSet<&'a str>) -> (Vec<String>, Vec<String>) {
    (
        after.difference(before).map(|s| s.to_string()).collect(),
        before.difference(after).map(|s| s.to_string()).collect(),
    )
}

fn same_set<T: Ord>(a: &[T], b: &[T]) -> bool {
    a.iter().collect::<BTreeSet<_>>() == b.iter().collect::<BTreeSet<_>>()
}

fn variable_map(vars: &[Variable]) -> BTreeMap<&str, &str> {
    vars.iter().map(|v| (v.key.as_str(), v.value.as_str())).collect()
}

fn job_field_value(job: &Job, field: Field) -> Value {
    match field {
        Field::Stage => to_json(&job.stage),
        Field::Image => to_json(&job.image),
        Field::Needs => to_json(&job.needs),
        Field::Conditions => to_json(&job.conditions),
        Field::When => to_json(&job.when),
        Field::Script => to_json(&job.script),
        Field::Variables => to_json(&job.variables),
        Field::AllowFailure => to_json(&job.allow_failure),
        Field::Tags => to_json(&job.tags),
        Field::Retry => to_json(&job.retry),
        Field::Extends => Value::Null,
    }
}

fn job_field_equal(a: &Job, b: &Job, field: Field) -> bool {
    match field {
        Field::Stage => a.stage == b.stage,
        Field::Image => a.image == b.image,
        Field::Needs => same_set(&a.needs, &b.needs),
        Field::Conditions => a.conditions == b.conditions,
        Field::When => a.when == b.when,
        Field::Script => a.script == b.script,
        Field::Variables => variable_map(&a.variables) == variable_map(&b.variables),
        Field::AllowFailure => a.allow_failure == b.allow_failure,
        Field::Tags => same_set(&a.tags, &b.tags),
        Field::Retry => a.retry == b.retry,
        Field::Extends => true,
    }
}

/// Field changes between two job definitions, in field declaration order.
pub fn job_delta(a: &Job, b: &Job) -> Vec<FieldChange> {
    Field::JOB_FIELDS
        .iter()
        .filter(|f| !job_field_equal(a, b, **f))
        .map(|&field| FieldChange {
            field,
            before: job_field_value(a, field),
            after: job_field_value(b, field),
        })
        .collect()
}

fn template_field(body: &TemplateBody, field: Field) -> (Value, Option<Vec<String>>) {
    // The second element carries the comparison key for set-valued fields.
    match field {
        Field::Stage => (to_json(&body.stage), None),
        Field::Image => (to_json(&body.image), None),
        Field::Needs => (to_json(&body.needs), body.needs.as_ref().map(|v| sorted(v))),
        Field::Conditions => (to_json(&body.conditions), None),
        Field::When => (to_json(&body.when), None),
        Field::Script => (to_json(&body.script), None),
        Field::Variables => (
            to_json(&body.variables),
            body.variables
                .as_ref()
                .map(|v| variable_map(v).into_iter().map(|(k, v)| format!("{k}={v}")).collect()),
        ),
        Field::AllowFailure => (to_json(&body.allow_failure), None),
        Field::Tags => (to_json(&body.tags), body.tags.as_ref().map(|v| sorted(v))),
        Field::Retry => (to_json(&body.retry), None),
        Field::Extends => (to_json(&body.extends), None),
    }
}

fn sorted(v: &[String]) -> Vec<String> {
    let set: BTreeSet<&String> = v.iter().collect();
    set.into_iter().cloned().collect()
}

/// Field changes between two template bodies as written (before `extends`
/// is resolved).
pub fn template_delta(a: &TemplateBody, b: &TemplateBody) -> Vec<FieldChange> {
    Field::JOB_FIELDS
        .iter()
        .copied()
        .chain(std::iter::once(Field::Extends))
        .filter_map(|field| {
            let (va, ka) = template_field(a, field);
            let (vb, kb) = template_field(b, field);
            let equal = match (ka, kb) {
                (Some(x), Some(y)) => x == y,
                _ => va == vb,
            };
            (!equal).then_some(FieldChange {
                field,
                before: va,
                after: vb,
            })
        })
        .collect()
}

/// Compares two versions. All name lists are sorted.
pub fn diff(v1: &Pipeline, v2: &Pipeline) -> StructuralDiff {
    let jobs1: BTreeSet<&str> = v1.jobs.iter().map(|j| j.name.as_str()).collect();
    let jobs2: BTreeSet<&str> = v2.jobs.iter().map(|j| j.name.as_str()).collect();
    let (added_jobs, removed_jobs) = name_diff(&jobs1, &jobs2);
    let modified_jobs = jobs1
        .intersection(&jobs2)
        .filter_map(|name| {
            let changes = job_delta(v1.job(name)?, v2.job(name)?);
            (!changes.is_empty()).then(|| JobDelta {
                name: name.to_string(),
                field_changes: changes,
            })
        })
        .collect();

    let t1: BTreeSet<&str> = v1.templates.iter().map(|t| t.name.as_str()).collect();
    let t2: BTreeSet<&str> = v2.templates.iter().map(|t| t.name.as_str()).collect();
    let (added_templates, removed_templates) = name_diff(&t1, &t2);
    let modified_templates = t1
        .intersection(&t2)
        .filter_map(|name| {
            let changes = template_delta(&v1.template(name)?.body, &v2.template(name)?.body);
            (!changes.is_empty()).then(|| JobDelta {
                name: name.to_string(),
                field_changes: changes,
            })
        })
        .collect();

    let s1: BTreeSet<&str> = v1.stage_order.iter().map(String::as_str).collect();
    let s2: BTreeSet<&str> = v2.stage_order.iter().map(String::as_str).collect();
    let (added_stages, removed_stages) = name_diff(&s1, &s2);
    let stage_order_changed = s1 == s2 && v1.stage_order != v2.stage_order;

    let vars1 = variable_map(&v1.variables);
    let vars2 = variable_map(&v2.variables);
    let mut variable_changes = VariableChanges::default();
    for v in &v2.variables {
        if !vars1.contains_key(v.key.as_str()) {
            variable_changes.added.push(v.clone());
        }
    }
    for v in &v1.variables {
        match vars2.get(v.key.as_str()) {
            None => variable_changes.removed.push(v.clone()),
            Some(after) if *after != v.value => variable_changes.modified.push(ValueChange {
                key: v.key.clone(),
                before: v.value.clone(),
                after: after.to_string(),
            }),
            Some(_) => {}
        }
    }
    variable_changes.added.sort_by(|a, b| a.key.cmp(&b.key));
    variable_changes.removed.sort_by(|a, b| a.key.cmp(&b.key));
    variable_changes.modified.sort_by(|a, b| a.key.cmp(&b.key));

    let tr1: BTreeSet<TriggerType> = v1.trigger_types().into_iter().collect();
    let tr2: BTreeSet<TriggerType> = v2.trigger_types().into_iter().collect();
    let trigger_changes = TriggerChanges {
        added: tr2.difference(&tr1).copied().collect(),
        removed: tr1.difference(&tr2).copied().collect(),
    };

    StructuralDiff {
        schema: DIFF_SCHEMA.to_string(),
        from_hash: v1.yaml_hash.clone(),
        to_hash: v2.yaml_hash.clone(),
        added_jobs,
        removed_jobs,
        modified_jobs,
        added_templates,
        removed_templates,
        modified_templates,
        added_stages,
        removed_stages,
        stage_order_changed,
        variable_changes,
        trigger_changes,
        summary: CountDeltas::new(v1, v2),
    }
}

/// Terminal report: count lines, a totals line, then one line per change.
impl fmt::Display for StructuralDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.summary;
        writeln!(
            f,
            "stages {} → {} ({:+})",
            s.stages_before, s.stages_after, s.stages_delta
        )?;
        writeln!(f, "jobs {} → {} ({:+})", s.jobs_before, s.jobs_after, s.jobs_delta)?;
        write!(
            f,
            "{} added, {} removed, {} modified",
            self.added_jobs.len(),
            self.removed_jobs.len(),
            self.modified_jobs.len()
        )?;
        let changed = |d: &JobDelta| d.fields().iter().map(|x| x.as_str()).collect::<Vec<_>>().join(", ");
        for name in &self.added_jobs {
            write!(f, "\n+ job {name}")?;
        }
        for name in &self.removed_jobs {
            write!(f, "\n- job {name}")?;
        }
        for d in &self.modified_jobs {
            write!(f, "\n~ job {} ({})", d.name, changed(d))?;
        }
        for name in &self.added_templates {
            write!(f, "\n+ template {name}")?;
        }
        for name in &self.removed_templates {
            write!(f, "\n- template {name}")?;
        }
        for d in &self.modified_templates {
            write!(f, "\n~ template {} ({})", d.name, changed(d))?;
        }
        for name in &self.added_stages {
            write!(f, "\n+ stage {name}")?;
        }
        for name in &self.removed_stages {
            write!(f, "\n- stage {name}")?;
        }
        if self.stage_order_changed {
            write!(f, "\n~ stage order")?;
        }
        for v in &self.variable_changes.added {
            write!(f, "\n+ variable {}", v.key)?;
        }
        for v in &self.variable_changes.removed {
            write!(f, "\n- variable {}", v.key)?;
        }
        for c in &self.variable_changes.modified {
            write!(f, "\n~ variable {}", c.key)?;
        }
        for t in &self.trigger_changes.added {
            write!(f, "\n+ trigger {t}")?;
        }
        for t in &self.trigger_changes.removed {
            write!(f, "\n- trigger {t}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Added,
    Removed,
    Modified,
}

/// Change markers for one version's diagram, keyed by element id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffOverlay {
    pub yaml_hash: String,
    pub elements: BTreeMap<String, ChangeKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProjectionError {
    #[error("{kind} {name:?} has no element in the {side} document")]
    MissingElement {
        kind: &'static str,
        name: String,
        side: &'static str,
    },
}

/// Projects a diff onto the two documents it was computed from. Removed
/// entities mark the first, added ones the second, modified jobs both.
pub fn project(
    diff: &StructuralDiff,
    b1: &BpmnDocument,
    b2: &BpmnDocument,
) -> Result<(DiffOverlay, DiffOverlay), ProjectionError> {
    fn mark(
        overlay: &mut DiffOverlay,
        index: &BTreeMap<String, String>,
        names: &[String],
        kind: &'static str,
        side: &'static str,
        change: ChangeKind,
    ) -> Result<(), ProjectionError> {
        for name in names {
            let id = index.get(name).ok_or_else(|| ProjectionError::MissingElement {
                kind,
                name: name.clone(),
                side,
            })?;
            overlay.elements.insert(id.clone(), change);
        }
        Ok(())
    }

    let mut before = DiffOverlay {
        yaml_hash: b1.yaml_hash.clone(),
        ..Default::default()
    };
    let mut after = DiffOverlay {
        yaml_hash: b2.yaml_hash.clone(),
        ..Default::default()
    };
    let modified: Vec<String> = diff.modified_jobs.iter().map(|d| d.name.clone()).collect();
    mark(
        &mut before,
        &b1.element_index,
        &diff.removed_jobs,
        "job",
        "before",
        ChangeKind::Removed,
    )?;
    mark(
        &mut before,
        &b1.element_index,
        &modified,
        "job",
        "before",
        ChangeKind::Modified,
    )?;
    mark(
        &mut after,
        &b2.element_index,
        &diff.added_jobs,
        "job",
        "after",
        ChangeKind::Added,
    )?;
    mark(
        &mut after,
        &b2.element_index,
        &modified,
        "job",
        "after",
        ChangeKind::Modified,
    )?;
    mark(
        &mut before,
        &b1.lane_index,
        &diff.removed_stages,
        "stage",
        "before",
        ChangeKind::Removed,
    )?;
    mark(
        &mut after,
        &b2.lane_index,
        &diff.added_stages,
        "stage",
        "after",
        ChangeKind::Added,
    )?;
    Ok((before, after))
}
