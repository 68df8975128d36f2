//! Seeded random pipelines. Generated models are valid by construction and
//! round-trip through [`to_yaml`] and the parser.

use pipetwin_core::model::{
    Condition, Job, Template, TemplateBody, Trigger, TriggerType, Variable, VariableScope, WhenPolicy,
};
use pipetwin_core::{compute_yaml_hash, validate, Pipeline};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_yaml::{Mapping, Value};

pub const JOB_NAMES: &[&str] = &[
    "build",
    "lint",
    "unit",
    "e2e tests",
    "deploy:prod",
    "pkg.linux",
    "docs",
    "scan-deps",
];
pub const STAGE_NAMES: &[&str] = &["prep", "build", "test", "package", "deploy"];
const TEMPLATE_NAMES: &[&str] = &[".base", ".docker", ".cache"];
const SCRIPTS: &[&str] = &[
    "make",
    "make test",
    "echo \"done: ok\"",
    "./ci/run.sh --fast",
    "cargo build",
];
const IMAGES: &[&str] = &["alpine:3.20", "rust:1.80", "node:22", "registry.example.com/tools:1"];
const VAR_KEYS: &[&str] = &["GIT_DEPTH", "MODE", "TARGET"];
const VAR_VALUES: &[&str] = &["1", "fast", "x86_64", "yes", ""];
const TAGS: &[&str] = &["docker", "linux", "large", "saas-macos-medium-m1"];
const IF_EXPRS: &[&str] = &[
    "$CI_COMMIT_BRANCH == \"main\"",
    "$CI_PIPELINE_SOURCE == \"schedule\"",
    "$RUN_E2E",
];
const PATHS: &[&str] = &["src/**/*", "Cargo.lock", "docs/*.md"];

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("non-empty pool")
}

fn subset<R: Rng>(rng: &mut R, pool: &[&str], max: usize) -> Vec<String> {
    let n = rng.random_range(0..=max.min(pool.len()));
    let mut out: Vec<String> = pool.choose_multiple(rng, n).map(|s| s.to_string()).collect();
    out.shuffle(rng);
    out
}

fn random_variables<R: Rng>(rng: &mut R, scope: VariableScope) -> Vec<Variable> {
    let mut keys = subset(rng, VAR_KEYS, 2);
    keys.sort();
    keys.into_iter()
        .map(|key| Variable {
            key,
            value: pick(rng, VAR_VALUES).to_string(),
            scope,
        })
        .collect()
}

fn random_conditions<R: Rng>(rng: &mut R) -> Vec<Condition> {
    (0..rng.random_range(0..=2))
        .map(|_| match rng.random_range(0..3) {
            0 => Condition::If(pick(rng, IF_EXPRS).to_string()),
            1 => Condition::Changes(subset(rng, PATHS, 2).into_iter().take(2).collect()),
            _ => Condition::Exists(vec![pick(rng, PATHS).to_string()]),
        })
        .collect()
}

fn random_when<R: Rng>(rng: &mut R) -> WhenPolicy {
    // Half the jobs keep the default so manual tasks stay a minority.
    if rng.random_bool(0.5) {
        WhenPolicy::OnSuccess
    } else {
        *WhenPolicy::ALL.choose(rng).unwrap()
    }
}

fn random_script<R: Rng>(rng: &mut R) -> Vec<String> {
    (0..rng.random_range(1..=3))
        .map(|_| pick(rng, SCRIPTS).to_string())
        .collect()
}

fn random_job<R: Rng>(rng: &mut R, name: &str, stage: &str) -> Job {
    let mut job = Job::new(name, stage);
    job.script = random_script(rng);
    job.image = rng.random_bool(0.5).then(|| pick(rng, IMAGES).to_string());
    job.when = random_when(rng);
    job.allow_failure = rng.random_bool(0.2);
    job.conditions = random_conditions(rng);
    job.variables = random_variables(rng, VariableScope::Job);
    job.tags = subset(rng, TAGS, 2);
    job.retry = rng.random_bool(0.3).then(|| rng.random_range(0..=2));
    job
}

fn random_template<R: Rng>(rng: &mut R, name: &str) -> Template {
    let mut body = TemplateBody::default();
    if rng.random_bool(0.5) {
        body.image = Some(pick(rng, IMAGES).to_string());
    }
    if rng.random_bool(0.4) {
        body.script = Some(random_script(rng));
    }
    if rng.random_bool(0.3) {
        body.tags = Some(subset(rng, TAGS, 2));
    }
    if rng.random_bool(0.3) {
        body.variables = Some(random_variables(rng, VariableScope::Job));
    }
    if rng.random_bool(0.2) {
        body.retry = Some(rng.random_range(0..=2));
    }
    if rng.random_bool(0.2) {
        body.when = Some(*WhenPolicy::ALL.choose(rng).unwrap());
    }
    if rng.random_bool(0.2) {
        body.allow_failure = Some(rng.random_bool(0.5));
    }
    Template {
        name: name.to_string(),
        body,
    }
}

/// Random declared stage list: a subsequence of [`STAGE_NAMES`].
fn random_stages<R: Rng>(rng: &mut R, max: usize) -> Vec<String> {
    let k = rng.random_range(1..=max.clamp(1, STAGE_NAMES.len()));
    let mut idx: Vec<usize> = (0..STAGE_NAMES.len())
        .collect::<Vec<_>>()
        .choose_multiple(rng, k)
        .copied()
        .collect();
    idx.sort();
    idx.into_iter().map(|i| STAGE_NAMES[i].to_string()).collect()
}

/// A valid pipeline with at most `max_jobs` jobs (and at least one).
pub fn random_pipeline<R: Rng>(rng: &mut R, max_jobs: usize) -> Pipeline {
    let stage_order = random_stages(rng, 4);
    let n = rng.random_range(1..=max_jobs.clamp(1, JOB_NAMES.len()));
    let mut names: Vec<&str> = JOB_NAMES.choose_multiple(rng, n).copied().collect();
    names.sort();
    let jobs = names
        .iter()
        .map(|name| {
            let stage = stage_order.choose(rng).unwrap();
            random_job(rng, name, stage)
        })
        .collect();
    let mut p = Pipeline {
        git_ref: "main".into(),
        commit_sha: String::new(),
        file_path: ".gitlab-ci.yml".into(),
        yaml_hash: String::new(),
        stage_order,
        jobs,
        templates: Vec::new(),
        variables: random_variables(rng, VariableScope::Pipeline),
        triggers: random_triggers(rng),
    };
    let mut tnames = subset(rng, TEMPLATE_NAMES, 2);
    tnames.sort();
    p.templates = tnames.iter().map(|t| random_template(rng, t)).collect();
    add_random_needs(rng, &mut p);
    finish(p)
}

fn random_triggers<R: Rng>(rng: &mut R) -> Vec<Trigger> {
    let k = rng.random_range(0..=3);
    TriggerType::ALL
        .choose_multiple(rng, k)
        .map(|t| Trigger { trigger_type: *t })
        .collect()
}

/// Whether `need` may precede `job` without risking a cycle: an earlier
/// stage, or the same stage and a smaller name.
fn may_need(p: &Pipeline, job: &Job, need: &Job) -> bool {
    let (ji, ni) = (p.stage_index(&job.stage).unwrap(), p.stage_index(&need.stage).unwrap());
    ni < ji || (ni == ji && need.name < job.name)
}

fn add_random_needs<R: Rng>(rng: &mut R, p: &mut Pipeline) {
    for i in 0..p.jobs.len() {
        let candidates: Vec<String> = p
            .jobs
            .iter()
            .filter(|n| may_need(p, &p.jobs[i], n))
            .map(|n| n.name.clone())
            .collect();
        let k = rng.random_range(0..=candidates.len().min(3));
        let mut needs: Vec<String> = candidates.choose_multiple(rng, k).cloned().collect();
        needs.shuffle(rng);
        p.jobs[i].needs = needs;
    }
}

/// Drops needs that dangle or could close a cycle after an edit.
fn repair_needs(p: &mut Pipeline) {
    let snapshot = p.clone();
    for job in &mut p.jobs {
        let me = snapshot.job(&job.name).unwrap().clone();
        job.needs
            .retain(|n| snapshot.job(n).is_some_and(|need| may_need(&snapshot, &me, need)));
    }
}

/// Sorts, hashes and checks a generated model.
fn finish(mut p: Pipeline) -> Pipeline {
    p.jobs.sort_by(|a, b| a.name.cmp(&b.name));
    p.templates.sort_by(|a, b| a.name.cmp(&b.name));
    p.yaml_hash = compute_yaml_hash(to_yaml(&p).as_bytes());
    let report = validate(&p);
    assert!(report.is_valid(), "generator produced an invalid model: {report}");
    p
}

/// A related pipeline: one to three edits applied to `base`, never growing
/// past `max_jobs` jobs.
pub fn mutate<R: Rng>(rng: &mut R, base: &Pipeline, max_jobs: usize) -> Pipeline {
    let mut p = base.clone();
    for _ in 0..rng.random_range(1..=3) {
        match rng.random_range(0..9) {
            0 if p.jobs.len() > 1 => {
                let i = rng.random_range(0..p.jobs.len());
                p.jobs.remove(i);
            }
            1 if p.jobs.len() < max_jobs => {
                let free: Vec<&str> = JOB_NAMES.iter().copied().filter(|n| p.job(n).is_none()).collect();
                if let Some(name) = free.choose(rng) {
                    let stage = p.stage_order.choose(rng).unwrap().clone();
                    let job = random_job(rng, name, &stage);
                    p.jobs.push(job);
                    p.jobs.sort_by(|a, b| a.name.cmp(&b.name));
                }
            }
            2 => {
                let free: Vec<&str> = STAGE_NAMES
                    .iter()
                    .copied()
                    .filter(|s| p.stage_index(s).is_none())
                    .collect();
                if let Some(s) = free.choose(rng) {
                    let at = rng.random_range(0..=p.stage_order.len());
                    p.stage_order.insert(at, s.to_string());
                }
            }
            3 if p.stage_order.len() > 1 => {
                let i = rng.random_range(0..p.stage_order.len());
                let gone = p.stage_order.remove(i);
                let fallback = p.stage_order[0].clone();
                for j in p.jobs.iter_mut().filter(|j| j.stage == gone) {
                    j.stage = fallback.clone();
                }
            }
            4 => p.variables = random_variables(rng, VariableScope::Pipeline),
            5 => p.triggers = random_triggers(rng),
            6 => {
                let name = pick(rng, TEMPLATE_NAMES);
                p.templates.retain(|t| t.name != name);
                if rng.random_bool(0.7) {
                    p.templates.push(random_template(rng, name));
                }
            }
            _ => {
                let i = rng.random_range(0..p.jobs.len());
                mutate_job_field(rng, &mut p, i);
            }
        }
    }
    repair_needs(&mut p);
    finish(p)
}

fn mutate_job_field<R: Rng>(rng: &mut R, p: &mut Pipeline, i: usize) {
    let stage = p.stage_order.choose(rng).unwrap().clone();
    let others: Vec<String> = p.jobs.iter().map(|j| j.name.clone()).collect();
    let job = &mut p.jobs[i];
    match rng.random_range(0..10) {
        0 => job.stage = stage,
        1 => job.image = rng.random_bool(0.5).then(|| pick(rng, IMAGES).to_string()),
        2 => {
            let k = rng.random_range(0..=2.min(others.len()));
            job.needs = others.choose_multiple(rng, k).cloned().collect();
        }
        3 => job.conditions = random_conditions(rng),
        4 => job.when = *WhenPolicy::ALL.choose(rng).unwrap(),
        5 => job.script = random_script(rng),
        6 => job.variables = random_variables(rng, VariableScope::Job),
        7 => job.allow_failure = !job.allow_failure,
        8 => job.tags.shuffle(rng),
        _ => job.retry = rng.random_bool(0.5).then(|| rng.random_range(0..=2)),
    }
}

/// Serializes a model back to CI configuration text, jobs in model order.
pub fn to_yaml(p: &Pipeline) -> String {
    let order: Vec<usize> = (0..p.jobs.len()).collect();
    to_yaml_ordered(p, &order)
}

/// Like [`to_yaml`] with jobs declared in the given order.
pub fn to_yaml_ordered(p: &Pipeline, order: &[usize]) -> String {
    let mut top = Mapping::new();
    if !p.triggers.is_empty() {
        let rules: Vec<Value> = p
            .triggers
            .iter()
            .map(|t| {
                let expr = match t.trigger_type {
                    TriggerType::TagPush => "$CI_COMMIT_TAG".to_string(),
                    TriggerType::MergeRequest => "$CI_PIPELINE_SOURCE == \"merge_request_event\"".to_string(),
                    other => format!("$CI_PIPELINE_SOURCE == \"{}\"", other.as_str()),
                };
                map([("if", Value::from(expr))])
            })
            .collect();
        top.insert("workflow".into(), map([("rules", Value::Sequence(rules))]));
    }
    top.insert("stages".into(), strings(&p.stage_order));
    if !p.variables.is_empty() {
        top.insert("variables".into(), variables(&p.variables));
    }
    for t in &p.templates {
        top.insert(t.name.clone().into(), template_value(&t.body));
    }
    for &i in order {
        let j = &p.jobs[i];
        top.insert(j.name.clone().into(), job_value(j));
    }
    serde_yaml::to_string(&Value::Mapping(top)).expect("YAML serialization")
}

fn map<const N: usize>(entries: [(&str, Value); N]) -> Value {
    Value::Mapping(entries.into_iter().map(|(k, v)| (Value::from(k), v)).collect())
}

fn strings(items: &[String]) -> Value {
    Value::Sequence(items.iter().map(|s| Value::from(s.as_str())).collect())
}

fn variables(vars: &[Variable]) -> Value {
    Value::Mapping(
        vars.iter()
            .map(|v| (Value::from(v.key.as_str()), Value::from(v.value.as_str())))
            .collect(),
    )
}

fn rules(conditions: &[Condition]) -> Value {
    Value::Sequence(
        conditions
            .iter()
            .map(|c| match c {
                Condition::If(e) => map([("if", Value::from(e.as_str()))]),
                Condition::Changes(paths) => map([("changes", strings(paths))]),
                Condition::Exists(paths) => map([("exists", strings(paths))]),
            })
            .collect(),
    )
}

fn job_value(j: &Job) -> Value {
    let mut m = Mapping::new();
    m.insert("stage".into(), j.stage.as_str().into());
    if let Some(image) = &j.image {
        m.insert("image".into(), image.as_str().into());
    }
    m.insert("when".into(), j.when.as_str().into());
    m.insert("allow_failure".into(), j.allow_failure.into());
    if !j.needs.is_empty() {
        m.insert("needs".into(), strings(&j.needs));
    }
    if !j.conditions.is_empty() {
        m.insert("rules".into(), rules(&j.conditions));
    }
    if !j.variables.is_empty() {
        m.insert("variables".into(), variables(&j.variables));
    }
    if !j.tags.is_empty() {
        m.insert("tags".into(), strings(&j.tags));
    }
    if let Some(r) = j.retry {
        m.insert("retry".into(), r.into());
    }
    m.insert("script".into(), strings(&j.script));
    Value::Mapping(m)
}

fn template_value(b: &TemplateBody) -> Value {
    let mut m = Mapping::new();
    if let Some(s) = &b.stage {
        m.insert("stage".into(), s.as_str().into());
    }
    if let Some(image) = &b.image {
        m.insert("image".into(), image.as_str().into());
    }
    if let Some(w) = b.when {
        m.insert("when".into(), w.as_str().into());
    }
    if let Some(a) = b.allow_failure {
        m.insert("allow_failure".into(), a.into());
    }
    if let Some(n) = &b.needs {
        m.insert("needs".into(), strings(n));
    }
    if let Some(c) = &b.conditions {
        m.insert("rules".into(), rules(c));
    }
    if let Some(v) = &b.variables {
        m.insert("variables".into(), variables(v));
    }
    if let Some(t) = &b.tags {
        m.insert("tags".into(), strings(t));
    }
    if let Some(r) = b.retry {
        m.insert("retry".into(), r.into());
    }
    if let Some(s) = &b.script {
        m.insert("script".into(), strings(s));
    }
    if let Some(e) = &b.extends {
        m.insert("extends".into(), strings(e));
    }
    Value::Mapping(m)
}

/// Half independent pairs, half a pipeline and an edit of it.
pub fn diff_pairs(seed: u64, n: usize) -> Vec<(Pipeline, Pipeline)> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let a = random_pipeline(&mut rng, 6);
            let b = if rng.random_bool(0.5) {
                random_pipeline(&mut rng, 6)
            } else {
                mutate(&mut rng, &a, 6)
            };
            (a, b)
        })
        .collect()
}
