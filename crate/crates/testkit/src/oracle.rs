//! Brute-force structural comparison. It shares no code with the diff
//! engine: every entity is flattened to JSON and compared key by key.

use std::collections::{BTreeMap, BTreeSet};

use pipetwin_core::diff::StructuralDiff;
use pipetwin_core::Pipeline;
use serde_json::Value;

/// Keys whose values compare as sets.
const SET_KEYS: &[&str] = &["needs", "tags"];

/// The comparable skeleton of a diff: names and changed field names only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleDiff {
    pub added_jobs: BTreeSet<String>,
    pub removed_jobs: BTreeSet<String>,
    pub modified_jobs: BTreeMap<String, BTreeSet<String>>,
    pub added_templates: BTreeSet<String>,
    pub removed_templates: BTreeSet<String>,
    pub modified_templates: BTreeMap<String, BTreeSet<String>>,
    pub added_stages: BTreeSet<String>,
    pub removed_stages: BTreeSet<String>,
    pub added_variables: BTreeSet<String>,
    pub removed_variables: BTreeSet<String>,
    pub modified_variables: BTreeSet<String>,
    pub added_triggers: BTreeSet<String>,
    pub removed_triggers: BTreeSet<String>,
    pub jobs_delta: i64,
    pub stages_delta: i64,
}

fn normalize(key: &str, v: &Value) -> Value {
    match (key, v) {
        (k, Value::Array(items)) if SET_KEYS.contains(&k) => {
            let set: BTreeSet<String> = items.iter().map(|i| i.to_string()).collect();
            Value::Array(set.into_iter().map(Value::String).collect())
        }
        ("variables", Value::Array(items)) => {
            let m: BTreeMap<String, Value> = items
                .iter()
                .map(|i| (i["key"].as_str().unwrap_or_default().to_string(), i["value"].clone()))
                .collect();
            serde_json::to_value(m).unwrap()
        }
        _ => v.clone(),
    }
}

/// Field names whose normalized JSON differs. Absent keys compare as null.
fn changed_fields(a: &Value, b: &Value) -> BTreeSet<String> {
    let empty = serde_json::Map::new();
    let (a, b) = (a.as_object().unwrap_or(&empty), b.as_object().unwrap_or(&empty));
    a.keys()
        .chain(b.keys())
        .filter(|k| k.as_str() != "name")
        .filter(|k| {
            let x = normalize(k, a.get(*k).unwrap_or(&Value::Null));
            let y = normalize(k, b.get(*k).unwrap_or(&Value::Null));
            x != y
        })
        .cloned()
        .collect()
}

fn by_name<T: serde::Serialize>(items: &[T], name: impl Fn(&T) -> &str) -> BTreeMap<String, Value> {
    items
        .iter()
        .map(|i| (name(i).to_string(), serde_json::to_value(i).unwrap()))
        .collect()
}

fn set_diff(
    a: &BTreeMap<String, Value>,
    b: &BTreeMap<String, Value>,
) -> (BTreeSet<String>, BTreeSet<String>, BTreeMap<String, BTreeSet<String>>) {
    let added = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
    let removed = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
    let mut modified = BTreeMap::new();
    for (k, va) in a {
        if let Some(vb) = b.get(k) {
            let f = changed_fields(va, vb);
            if !f.is_empty() {
                modified.insert(k.clone(), f);
            }
        }
    }
    (added, removed, modified)
}

pub fn oracle_diff(a: &Pipeline, b: &Pipeline) -> OracleDiff {
    let (added_jobs, removed_jobs, modified_jobs) =
        set_diff(&by_name(&a.jobs, |j| &j.name), &by_name(&b.jobs, |j| &j.name));
    let body = |p: &Pipeline| -> BTreeMap<String, Value> {
        p.templates
            .iter()
            .map(|t| (t.name.clone(), serde_json::to_value(&t.body).unwrap()))
            .collect()
    };
    let (added_templates, removed_templates, modified_templates) = set_diff(&body(a), &body(b));

    let stages = |p: &Pipeline| -> BTreeSet<String> { p.stage_order.iter().cloned().collect() };
    let (sa, sb) = (stages(a), stages(b));

    let vars = |p: &Pipeline| -> BTreeMap<String, String> {
        p.variables.iter().map(|v| (v.key.clone(), v.value.clone())).collect()
    };
    let (va, vb) = (vars(a), vars(b));

    let triggers =
        |p: &Pipeline| -> BTreeSet<String> { p.triggers.iter().map(|t| t.trigger_type.as_str().to_string()).collect() };
    let (ta, tb) = (triggers(a), triggers(b));

    OracleDiff {
        added_jobs,
        removed_jobs,
        modified_jobs,
        added_templates,
        removed_templates,
        modified_templates,
        added_stages: sb.difference(&sa).cloned().collect(),
        removed_stages: sa.difference(&sb).cloned().collect(),
        added_variables: vb.keys().filter(|k| !va.contains_key(*k)).cloned().collect(),
        removed_variables: va.keys().filter(|k| !vb.contains_key(*k)).cloned().collect(),
        modified_variables: va
            .iter()
            .filter(|(k, v)| vb.get(*k).is_some_and(|w| w != *v))
            .map(|(k, _)| k.clone())
            .collect(),
        added_triggers: tb.difference(&ta).cloned().collect(),
        removed_triggers: ta.difference(&tb).cloned().collect(),
        jobs_delta: b.jobs.len() as i64 - a.jobs.len() as i64,
        stages_delta: b.stage_order.len() as i64 - a.stage_order.len() as i64,
    }
}

/// Projects an engine result onto the oracle's shape.
pub fn from_engine(d: &StructuralDiff) -> OracleDiff {
    let fields = |deltas: &[pipetwin_core::diff::JobDelta]| -> BTreeMap<String, BTreeSet<String>> {
        deltas
            .iter()
            .map(|j| {
                (
                    j.name.clone(),
                    j.fields().iter().map(|f| f.as_str().to_string()).collect(),
                )
            })
            .collect()
    };
    let set = |v: &[String]| -> BTreeSet<String> { v.iter().cloned().collect() };
    OracleDiff {
        added_jobs: set(&d.added_jobs),
        removed_jobs: set(&d.removed_jobs),
        modified_jobs: fields(&d.modified_jobs),
        added_templates: set(&d.added_templates),
        removed_templates: set(&d.removed_templates),
        modified_templates: fields(&d.modified_templates),
        added_stages: set(&d.added_stages),
        removed_stages: set(&d.removed_stages),
        added_variables: d.variable_changes.added.iter().map(|v| v.key.clone()).collect(),
        removed_variables: d.variable_changes.removed.iter().map(|v| v.key.clone()).collect(),
        modified_variables: d.variable_changes.modified.iter().map(|v| v.key.clone()).collect(),
        added_triggers: d.trigger_changes.added.iter().map(|t| t.as_str().to_string()).collect(),
        removed_triggers: d
            .trigger_changes
            .removed
            .iter()
            .map(|t| t.as_str().to_string())
            .collect(),
        jobs_delta: d.summary.jobs_delta,
        stages_delta: d.summary.stages_delta,
    }
}
