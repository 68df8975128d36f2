//! `.gitlab-ci.yml` to [`Pipeline`].
//!
//! The document is split into reserved directives, hidden templates and job
//! definitions. Jobs are resolved through their `extends` chains, defaults
//! are applied, the stage order is merged from the `stages:` list and the
//! per-job annotations, and pipeline triggers are lifted out of the
//! `workflow:rules` block. The result must pass [`validate`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::model::{
    compute_yaml_hash, validate, Condition, Job, Pipeline, Template, TemplateBody, Trigger, TriggerType,
    ValidationReport, Variable, VariableScope, DEFAULT_STAGE,
};

/// Longest `extends` chain followed before giving up.
pub const MAX_EXTENDS_DEPTH: usize = 16;

/// Top-level keys that configure the pipeline rather than define a job.
pub const RESERVED_KEYS: &[&str] = &[
    "default",
    "variables",
    "workflow",
    "stages",
    "image",
    "services",
    "include",
    "before_script",
    "after_script",
    "cache",
];

const PRE_STAGE: &str = ".pre";
const POST_STAGE: &str = ".post";
const PLATFORM_DEFAULT_STAGES: &[&str] = &["build", "test", "deploy"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(rename = "ref")]
    pub git_ref: String,
    pub commit_sha: String,
    pub file_path: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            git_ref: String::new(),
            commit_sha: String::new(),
            file_path: ".gitlab-ci.yml".to_string(),
        }
    }
}

/// Raw configuration bytes plus where they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawConfig {
    #[serde(with = "bytes_as_text")]
    pub raw_bytes: Vec<u8>,
    pub provenance: Provenance,
}

impl RawConfig {
    pub fn new(raw_bytes: impl Into<Vec<u8>>, provenance: Provenance) -> Self {
        RawConfig {
            raw_bytes: raw_bytes.into(),
            provenance,
        }
    }

    /// Bytes with an empty provenance, for offline use.
    pub fn from_bytes(raw_bytes: impl Into<Vec<u8>>) -> Self {
        Self::new(raw_bytes, Provenance::default())
    }

    pub fn yaml_hash(&self) -> String {
        compute_yaml_hash(&self.raw_bytes)
    }
}

/// Raw bytes travel as a string when valid UTF-8, otherwise as a byte array.
mod bytes_as_text {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Bytes(Vec<u8>),
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(bytes) {
            Ok(text) => Repr::Text(text.to_string()).serialize(s),
            Err(_) => Repr::Bytes(bytes.to_vec()).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::Text(t) => t.into_bytes(),
            Repr::Bytes(b) => b,
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("YAML syntax error: {0}")]
    YamlSyntax(String),
    #[error("top level of the configuration is not a mapping")]
    NotAMapping,
    #[error("{entity}: invalid {field}: {reason}")]
    InvalidField {
        entity: String,
        field: String,
        reason: String,
    },
    #[error("{job}: extends unknown template {template:?}")]
    UnknownTemplate { job: String, template: String },
    #[error("extends cycle: {}", chain.join(" -> "))]
    ExtendsCycle { chain: Vec<String> },
    #[error("{job}: extends chain deeper than {limit}")]
    MaxDepthExceeded { job: String, limit: usize },
    #[error("{job}: unknown when policy {value:?}")]
    UnknownWhenPolicy { job: String, value: String },
    #[error("pipeline failed validation:\n{0}")]
    ValidationFailed(ValidationReport),
}

/// Top-level keys partitioned by role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SectionSplit {
    pub reserved: BTreeMap<String, Value>,
    pub templates: BTreeMap<String, Value>,
    /// Job definitions in document order.
    pub job_nodes: Vec<(String, Value)>,
}

/// A parsed pipeline and the non-fatal findings collected on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub pipeline: Pipeline,
    pub warnings: Vec<String>,
}

pub fn parse(config: &RawConfig) -> Result<Pipeline, ParseError> {
    parse_with_warnings(config).map(|o| o.pipeline)
}

pub fn parse_with_warnings(config: &RawConfig) -> Result<ParseOutcome, ParseError> {
    let text = std::str::from_utf8(&config.raw_bytes).map_err(|e| ParseError::YamlSyntax(e.to_string()))?;
    let mut doc: Value = serde_yaml::from_str(text).map_err(|e| ParseError::YamlSyntax(e.to_string()))?;
    doc.apply_merge().map_err(|e| ParseError::YamlSyntax(e.to_string()))?;
    let Value::Mapping(top) = doc else {
        return Err(ParseError::NotAMapping);
    };
    let split = split_sections(&top)?;
    let mut warnings = Vec::new();

    if split.reserved.contains_key("include") {
        warnings.push("`include` present: included files are not fetched or merged".to_string());
    }

    let defaults = Defaults::from_split(&split)?;

    // Regular jobs may be extended as well as hidden ones.
    let mut lookup = split.templates.clone();
    for (name, node) in &split.job_nodes {
        lookup.entry(name.clone()).or_insert_with(|| node.clone());
    }

    let mut jobs = Vec::with_capacity(split.job_nodes.len());
    for (name, node) in &split.job_nodes {
        let resolved = resolve_named(name, node, &lookup)?;
        jobs.push(build_job(name, &resolved, &defaults)?);
    }

    let templates = split
        .templates
        .iter()
        .map(|(name, node)| build_template(name, node))
        .collect::<Result<Vec<_>, _>>()?;

    let declared = match split.reserved.get("stages") {
        Some(node) => Some(string_list(node, "<pipeline>", "stages")?),
        None => None,
    };
    let stage_order = merge_stage_order(declared.as_deref(), jobs.iter().map(|j| j.stage.as_str()));

    let variables = match split.reserved.get("variables") {
        Some(node) => variables_of(node, "<pipeline>", VariableScope::Pipeline)?,
        None => Vec::new(),
    };

    let extraction = extract_triggers(split.reserved.get("workflow"));
    warnings.extend(extraction.warnings);

    jobs.sort_by(|a, b| a.name.cmp(&b.name));

    let pipeline = Pipeline {
        git_ref: config.provenance.git_ref.clone(),
        commit_sha: config.provenance.commit_sha.clone(),
        file_path: config.provenance.file_path.clone(),
        yaml_hash: config.yaml_hash(),
        stage_order,
        jobs,
        templates,
        variables,
        triggers: extraction.triggers,
    };
    let report = validate(&pipeline);
    if !report.is_valid() {
        return Err(ParseError::ValidationFailed(report));
    }
    Ok(ParseOutcome { pipeline, warnings })
}

/// Partitions the top-level keys into reserved directives, hidden templates
/// and job definitions.
pub fn split_sections(top: &Mapping) -> Result<SectionSplit, ParseError> {
    let mut split = SectionSplit::default();
    for (key, value) in top {
        let Some(name) = key.as_str() else {
            return Err(ParseError::InvalidField {
                entity: "<pipeline>".into(),
                field: "top-level key".into(),
                reason: format!("{key:?} is not a string"),
            });
        };
        if RESERVED_KEYS.contains(&name) {
            split.reserved.insert(name.to_string(), value.clone());
        } else if name.starts_with('.') {
            split.templates.insert(name.to_string(), value.clone());
        } else {
            split.job_nodes.push((name.to_string(), value.clone()));
        }
    }
    Ok(split)
}

/// Merges the `extends` chain of `job_node` into a single node.
///
/// Parents are merged base-most first and left to right, then the node's own
/// keys. Mappings merge key-wise with the later side winning; scalars and
/// sequences are replaced whole. The result carries no `extends` key.
pub fn resolve_extends(job_node: &Value, templates: &BTreeMap<String, Value>) -> Result<Value, ParseError> {
    resolve_named("<job>", job_node, templates)
}

fn resolve_named(name: &str, node: &Value, templates: &BTreeMap<String, Value>) -> Result<Value, ParseError> {
    let mut stack = vec![name.to_string()];
    resolve_inner(node, templates, &mut stack).map(Value::Mapping)
}

fn resolve_inner(
    node: &Value,
    templates: &BTreeMap<String, Value>,
    stack: &mut Vec<String>,
) -> Result<Mapping, ParseError> {
    let owner = stack.last().cloned().unwrap_or_default();
    let map = as_mapping(node, &owner)?;
    let parents = match map.get("extends") {
        Some(v) => string_list(v, &owner, "extends")?,
        None => Vec::new(),
    };
    let mut merged = Mapping::new();
    for parent in parents {
        if stack.contains(&parent) {
            let mut chain = stack.clone();
            chain.push(parent);
            return Err(ParseError::ExtendsCycle { chain });
        }
        if stack.len() > MAX_EXTENDS_DEPTH {
            return Err(ParseError::MaxDepthExceeded {
                job: stack[0].clone(),
                limit: MAX_EXTENDS_DEPTH,
            });
        }
        let body = templates.get(&parent).ok_or_else(|| ParseError::UnknownTemplate {
            job: owner.clone(),
            template: parent.clone(),
        })?;
        stack.push(parent);
        let resolved = resolve_inner(body, templates, stack)?;
        stack.pop();
        deep_merge(&mut merged, resolved);
    }
    let mut own = map;
    own.remove("extends");
    deep_merge(&mut merged, own);
    Ok(merged)
}

fn deep_merge(base: &mut Mapping, overlay: Mapping) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(Value::Mapping(existing)), Value::Mapping(incoming)) => deep_merge(existing, incoming),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Triggers found in a `workflow:` block, plus warnings for rules that
/// carried no recognizable trigger.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriggerExtraction {
    pub triggers: Vec<Trigger>,
    pub warnings: Vec<String>,
}

fn pipeline_source_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"\$CI_PIPELINE_SOURCE\s*==\s*["']([A-Za-z_]+)["']"#).expect("valid regex"))
}

fn map_pipeline_source(source: &str) -> Option<TriggerType> {
    Some(match source {
        "push" => TriggerType::Push,
        "merge_request_event" => TriggerType::MergeRequest,
        "schedule" => TriggerType::Schedule,
        "api" | "trigger" => TriggerType::Api,
        "web" => TriggerType::Web,
        _ => return None,
    })
}

/// A bare presence test on `$CI_COMMIT_TAG` (not an equality comparison).
fn tests_commit_tag(expr: &str) -> bool {
    const VAR: &str = "$CI_COMMIT_TAG";
    let mut rest = expr;
    while let Some(pos) = rest.find(VAR) {
        let after = &rest[pos + VAR.len()..];
        let continues_ident = after
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_');
        if !continues_ident && !after.trim_start().starts_with("==") {
            return true;
        }
        rest = after;
    }
    false
}

/// Lifts trigger types out of `workflow:rules`. Order is first-seen and
/// duplicates are dropped.
pub fn extract_triggers(workflow: Option<&Value>) -> TriggerExtraction {
    let mut out = TriggerExtraction::default();
    let Some(rules) = workflow.and_then(|w| w.get("rules")).and_then(Value::as_sequence) else {
        return out;
    };
    let mut seen = BTreeSet::new();
    for (i, rule) in rules.iter().enumerate() {
        if rule.get("when").and_then(Value::as_str) == Some("never") {
            continue;
        }
        let Some(expr) = rule.get("if").and_then(Value::as_str) else {
            out.warnings
                .push(format!("workflow rule {i} has no `if` trigger pattern"));
            continue;
        };
        let mut found = Vec::new();
        for cap in pipeline_source_pattern().captures_iter(expr) {
            let source = &cap[1];
            match map_pipeline_source(source) {
                Some(t) => found.push(t),
                None => out.warnings.push(format!(
                    "workflow rule {i}: pipeline source {source:?} has no trigger type"
                )),
            }
        }
        if tests_commit_tag(expr) {
            found.push(TriggerType::TagPush);
        }
        if found.is_empty() {
            out.warnings
                .push(format!("workflow rule {i}: no trigger pattern in {expr:?}"));
        }
        for t in found {
            if seen.insert(t) {
                out.triggers.push(Trigger { trigger_type: t });
            }
        }
    }
    out
}

/// Declared stages first, then stages only named by jobs in first-seen
/// order. `.pre` and `.post` are pinned to the ends.
pub fn merge_stage_order<'a>(declared: Option<&[String]>, job_stages: impl Iterator<Item = &'a str>) -> Vec<String> {
    let job_stages: Vec<&str> = job_stages.collect();
    let mut order: Vec<String> = match declared {
        Some(list) => list.to_vec(),
        None => PLATFORM_DEFAULT_STAGES
            .iter()
            .filter(|s| job_stages.contains(s))
            .map(|s| s.to_string())
            .collect(),
    };
    for stage in job_stages {
        if !order.iter().any(|s| s == stage) {
            order.push(stage.to_string());
        }
    }
    if let Some(pos) = order.iter().position(|s| s == PRE_STAGE) {
        let pre = order.remove(pos);
        order.insert(0, pre);
    }
    if let Some(pos) = order.iter().position(|s| s == POST_STAGE) {
        let post = order.remove(pos);
        order.push(post);
    }
    order
}

/// Values from the `default:` block (and the legacy top-level `image:`).
#[derive(Debug, Default)]
struct Defaults {
    image: Option<String>,
    tags: Option<Vec<String>>,
    retry: Option<u32>,
}

impl Defaults {
    fn from_split(split: &SectionSplit) -> Result<Self, ParseError> {
        let mut d = Defaults::default();
        if let Some(node) = split.reserved.get("image") {
            d.image = image_of(node, "<pipeline>")?;
        }
        if let Some(Value::Mapping(block)) = split.reserved.get("default") {
            if let Some(node) = block.get("image") {
                d.image = image_of(node, "default")?;
            }
            if let Some(node) = block.get("tags") {
                d.tags = Some(string_list(node, "default", "tags")?);
            }
            if let Some(node) = block.get("retry") {
                d.retry = retry_of(node, "default")?;
            }
        }
        Ok(d)
    }
}

fn build_job(name: &str, node: &Value, defaults: &Defaults) -> Result<Job, ParseError> {
    let map = as_mapping(node, name)?;
    let body = body_of(name, &map)?;
    let mut job = Job::new(name, body.stage.unwrap_or_else(|| DEFAULT_STAGE.to_string()));
    job.script = body.script.unwrap_or_default();
    job.image = body.image.or_else(|| defaults.image.clone());
    job.when = body.when.unwrap_or_default();
    job.allow_failure = body.allow_failure.unwrap_or(false);
    job.needs = body.needs.unwrap_or_default();
    job.conditions = body.conditions.unwrap_or_default();
    job.variables = body.variables.unwrap_or_default();
    job.tags = body.tags.or_else(|| defaults.tags.clone()).unwrap_or_default();
    job.retry = body.retry.or(defaults.retry);
    Ok(job)
}

fn build_template(name: &str, node: &Value) -> Result<Template, ParseError> {
    let map = as_mapping(node, name)?;
    Ok(Template {
        name: name.to_string(),
        body: body_of(name, &map)?,
    })
}

/// Reads the modeled job attributes from one mapping without resolving
/// anything. Keys the model does not track are ignored.
fn body_of(owner: &str, map: &Mapping) -> Result<TemplateBody, ParseError> {
    let mut body = TemplateBody::default();
    if let Some(v) = map.get("stage") {
        body.stage = Some(scalar_string(v, owner, "stage")?);
    }
    if let Some(v) = map.get("script") {
        body.script = Some(script_of(v, owner)?);
    }
    if let Some(v) = map.get("image") {
        body.image = image_of(v, owner)?;
    }
    if let Some(v) = map.get("when") {
        let text = scalar_string(v, owner, "when")?;
        body.when = Some(text.parse().map_err(|_| ParseError::UnknownWhenPolicy {
            job: owner.to_string(),
            value: text,
        })?);
    }
    if let Some(v) = map.get("allow_failure") {
        body.allow_failure = Some(match v {
            Value::Bool(b) => *b,
            // `allow_failure: {exit_codes: ...}` tolerates some failures.
            Value::Mapping(_) => true,
            other => return Err(invalid(owner, "allow_failure", format!("expected bool, got {other:?}"))),
        });
    }
    if let Some(v) = map.get("needs") {
        body.needs = Some(needs_of(v, owner)?);
    }
    let mut conditions = Vec::new();
    let mut has_conditions = false;
    if let Some(v) = map.get("rules") {
        has_conditions = true;
        conditions.extend(rules_of(v, owner)?);
    }
    for legacy in ["only", "except"] {
        if let Some(v) = map.get(legacy) {
            has_conditions = true;
            conditions.push(Condition::If(legacy_expression(legacy, v)));
        }
    }
    if has_conditions {
        body.conditions = Some(conditions);
    }
    if let Some(v) = map.get("variables") {
        body.variables = Some(variables_of(v, owner, VariableScope::Job)?);
    }
    if let Some(v) = map.get("tags") {
        body.tags = Some(string_list(v, owner, "tags")?);
    }
    if let Some(v) = map.get("retry") {
        body.retry = retry_of(v, owner)?;
    }
    if let Some(v) = map.get("extends") {
        body.extends = Some(string_list(v, owner, "extends")?);
    }
    Ok(body)
}

fn invalid(owner: &str, field: &str, reason: String) -> ParseError {
    ParseError::InvalidField {
        entity: owner.to_string(),
        field: field.to_string(),
        reason,
    }
}

fn as_mapping(node: &Value, owner: &str) -> Result<Mapping, ParseError> {
    match node {
        Value::Mapping(m) => Ok(m.clone()),
        Value::Null => Ok(Mapping::new()),
        other => Err(invalid(
            owner,
            "definition",
            format!("expected a mapping, got {}", kind_of(other)),
        )),
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Sequence(_) => "sequence",
        Value::Mapping(_) => "mapping",
        Value::Tagged(_) => "tagged value",
    }
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Tagged(t) => {
            let inner = serde_yaml::to_string(&t.value).unwrap_or_default();
            Some(format!("{} {}", t.tag, inner.trim()))
        }
        _ => None,
    }
}

fn scalar_string(v: &Value, owner: &str, field: &str) -> Result<String, ParseError> {
    scalar_text(v).ok_or_else(|| invalid(owner, field, format!("expected a scalar, got {}", kind_of(v))))
}

/// A string or a (possibly nested) sequence of strings.
fn string_list(v: &Value, owner: &str, field: &str) -> Result<Vec<String>, ParseError> {
    let mut out = Vec::new();
    collect_strings(v, owner, field, &mut out)?;
    Ok(out)
}

fn collect_strings(v: &Value, owner: &str, field: &str, out: &mut Vec<String>) -> Result<(), ParseError> {
    match v {
        Value::Null => Ok(()),
        Value::Sequence(items) => {
            for item in items {
                collect_strings(item, owner, field, out)?;
            }
            Ok(())
        }
        other => {
            out.push(scalar_string(other, owner, field)?);
            Ok(())
        }
    }
}

fn script_of(v: &Value, owner: &str) -> Result<Vec<String>, ParseError> {
    string_list(v, owner, "script")
}

fn image_of(v: &Value, owner: &str) -> Result<Option<String>, ParseError> {
    match v {
        Value::Null => Ok(None),
        Value::Mapping(m) => match m.get("name") {
            Some(name) => Ok(Some(scalar_string(name, owner, "image")?)),
            None => Err(invalid(owner, "image", "mapping form needs a `name`".into())),
        },
        other => Ok(Some(scalar_string(other, owner, "image")?)),
    }
}

fn retry_of(v: &Value, owner: &str) -> Result<Option<u32>, ParseError> {
    let n = match v {
        Value::Null => return Ok(None),
        Value::Mapping(m) => match m.get("max") {
            Some(max) => max.clone(),
            None => return Ok(None),
        },
        other => other.clone(),
    };
    n.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .map(Some)
        .ok_or_else(|| invalid(owner, "retry", format!("expected a non-negative integer, got {n:?}")))
}

fn needs_of(v: &Value, owner: &str) -> Result<Vec<String>, ParseError> {
    let Value::Sequence(items) = v else {
        return match v {
            Value::Null => Ok(Vec::new()),
            _ => Err(invalid(owner, "needs", "expected a sequence".into())),
        };
    };
    let mut out = Vec::new();
    for item in items {
        match item {
            Value::Mapping(m) => {
                // Cross-project and parent-pipeline needs carry `project` or
                // `pipeline` and do not point into this configuration.
                if m.contains_key("project") || m.contains_key("pipeline") {
                    continue;
                }
                match m.get("job") {
                    Some(job) => out.push(scalar_string(job, owner, "needs")?),
                    None => return Err(invalid(owner, "needs", "mapping entry without `job`".into())),
                }
            }
            other => out.push(scalar_string(other, owner, "needs")?),
        }
    }
    Ok(out)
}

fn rules_of(v: &Value, owner: &str) -> Result<Vec<Condition>, ParseError> {
    let Value::Sequence(items) = v else {
        return Err(invalid(owner, "rules", "expected a sequence".into()));
    };
    let mut out = Vec::new();
    for rule in items {
        let Value::Mapping(rule) = rule else {
            continue;
        };
        if let Some(expr) = rule.get("if") {
            out.push(Condition::If(scalar_string(expr, owner, "rules:if")?));
        }
        if let Some(paths) = rule.get("changes") {
            out.push(Condition::Changes(path_list(paths, owner, "rules:changes")?));
        }
        if let Some(paths) = rule.get("exists") {
            out.push(Condition::Exists(path_list(paths, owner, "rules:exists")?));
        }
    }
    Ok(out)
}

/// `changes:`/`exists:` accept a list or a mapping with `paths:`.
fn path_list(v: &Value, owner: &str, field: &str) -> Result<Vec<String>, ParseError> {
    match v {
        Value::Mapping(m) => match m.get("paths") {
            Some(paths) => string_list(paths, owner, field),
            None => Ok(Vec::new()),
        },
        other => string_list(other, owner, field),
    }
}

fn legacy_expression(directive: &str, v: &Value) -> String {
    match v {
        Value::Mapping(m) => {
            let parts: Vec<String> = m
                .iter()
                .map(|(k, val)| {
                    let key = scalar_text(k).unwrap_or_default();
                    let mut items = Vec::new();
                    let _ = collect_strings(val, directive, directive, &mut items);
                    format!("{key} [{}]", items.join(", "))
                })
                .collect();
            format!("{directive}: {}", parts.join("; "))
        }
        other => {
            let mut items = Vec::new();
            let _ = collect_strings(other, directive, directive, &mut items);
            format!("{directive}: refs [{}]", items.join(", "))
        }
    }
}

fn variables_of(v: &Value, owner: &str, scope: VariableScope) -> Result<Vec<Variable>, ParseError> {
    let map = match v {
        Value::Mapping(m) => m,
        Value::Null => return Ok(Vec::new()),
        other => {
            return Err(invalid(
                owner,
                "variables",
                format!("expected a mapping, got {}", kind_of(other)),
            ))
        }
    };
    let mut out = Vec::with_capacity(map.len());
    for (key, value) in map {
        let key = scalar_string(key, owner, "variables")?;
        let value = match value {
            Value::Mapping(m) => m.get("value").and_then(scalar_text).unwrap_or_default(),
            Value::Null => String::new(),
            other => scalar_string(other, owner, "variables")?,
        };
        out.push(Variable { key, value, scope });
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}
