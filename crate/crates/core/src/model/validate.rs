use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use super::{Pipeline, Variable};

/// Structural rules checked by [`validate`]. The declaration order is the
/// report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    DuplicateStage,
    DuplicateJob,
    InvalidJobName,
    InvalidTemplateName,
    UnknownStage,
    SelfNeed,
    DuplicateNeed,
    UnresolvedNeed,
    LaterStageNeed,
    NeedsCycle,
    DuplicateVariable,
    DuplicateTrigger,
}

impl Rule {
    pub fn code(self) -> &'static str {
        match self {
            Rule::DuplicateStage => "V01",
            Rule::DuplicateJob => "V02",
            Rule::InvalidJobName => "V03",
            Rule::InvalidTemplateName => "V04",
            Rule::UnknownStage => "V05",
            Rule::SelfNeed => "V06",
            Rule::DuplicateNeed => "V07",
            Rule::UnresolvedNeed => "V08",
            Rule::LaterStageNeed => "V09",
            Rule::NeedsCycle => "V10",
            Rule::DuplicateVariable => "V11",
            Rule::DuplicateTrigger => "V12",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule.code(), self.entity, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn of_rule(&self, rule: Rule) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(move |v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        let n = self.violations.len();
        write!(f, "{n} violation{}", if n == 1 { "" } else { "s" })
    }
}

/// Checks every structural invariant of `pipeline`. Violations are returned
/// as data, sorted by rule and then entity name.
pub fn validate(pipeline: &Pipeline) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |rule, entity: &str, message: String| {
        out.push(Violation {
            rule,
            entity: entity.to_string(),
            message,
        })
    };

    let mut seen = BTreeSet::new();
    for stage in &pipeline.stage_order {
        if !seen.insert(stage.as_str()) {
            push(Rule::DuplicateStage, stage, "stage declared more than once".into());
        }
    }

    let mut job_count: BTreeMap<&str, usize> = BTreeMap::new();
    for job in &pipeline.jobs {
        *job_count.entry(job.name.as_str()).or_default() += 1;
    }
    for (name, n) in &job_count {
        if *n > 1 {
            push(Rule::DuplicateJob, name, format!("{n} jobs share this name"));
        }
    }

    for t in &pipeline.templates {
        if !t.name.starts_with('.') {
            push(
                Rule::InvalidTemplateName,
                &t.name,
                "template names start with '.'".into(),
            );
        }
    }

    for job in &pipeline.jobs {
        if job.name.is_empty() {
            push(Rule::InvalidJobName, &job.name, "job name is empty".into());
        } else if job.name.starts_with('.') {
            push(Rule::InvalidJobName, &job.name, "job name starts with '.'".into());
        }
        let own_stage = pipeline.stage_index(&job.stage);
        if own_stage.is_none() {
            push(
                Rule::UnknownStage,
                &job.name,
                format!("stage {:?} is not in the stage order", job.stage),
            );
        }
        let mut needs_seen = BTreeSet::new();
        for need in &job.needs {
            if need == &job.name {
                push(Rule::SelfNeed, &job.name, "job needs itself".into());
                continue;
            }
            if !needs_seen.insert(need.as_str()) {
                push(
                    Rule::DuplicateNeed,
                    &job.name,
                    format!("{need:?} listed more than once"),
                );
                continue;
            }
            match job_count.get(need.as_str()) {
                None => push(Rule::UnresolvedNeed, &job.name, format!("needs unknown job {need:?}")),
                Some(_) => {
                    let target = pipeline.job(need).expect("counted");
                    if let (Some(own), Some(theirs)) = (own_stage, pipeline.stage_index(&target.stage)) {
                        if theirs > own {
                            push(
                                Rule::LaterStageNeed,
                                &job.name,
                                format!(
                                    "needs {need:?} from later stage {:?} (own stage {:?})",
                                    target.stage, job.stage
                                ),
                            );
                        }
                    }
                }
            }
        }
        check_variables(&job.variables, &job.name, &mut push);
    }

    for members in cycles(pipeline) {
        push(
            Rule::NeedsCycle,
            &members.join(", "),
            format!("needs cycle through {{{}}}", members.join(", ")),
        );
    }

    check_variables(&pipeline.variables, "<pipeline>", &mut push);

    let mut trig = BTreeSet::new();
    for t in &pipeline.triggers {
        if !trig.insert(t.trigger_type) {
            push(
                Rule::DuplicateTrigger,
                t.trigger_type.as_str(),
                "trigger listed twice".into(),
            );
        }
    }

    out.sort_by(|a, b| (a.rule, &a.entity).cmp(&(b.rule, &b.entity)));
    ValidationReport { violations: out }
}

fn check_variables(vars: &[Variable], owner: &str, push: &mut impl FnMut(Rule, &str, String)) {
    let mut keys = BTreeSet::new();
    for v in vars {
        if !keys.insert(v.key.as_str()) {
            push(
                Rule::DuplicateVariable,
                owner,
                format!("variable {:?} defined twice", v.key),
            );
        }
    }
}

/// Strongly connected components of the resolved needs graph with more than
/// one member, each sorted by name. Self-needs are reported separately.
fn cycles(pipeline: &Pipeline) -> Vec<Vec<String>> {
    let mut graph = DiGraph::<&str, ()>::new();
    let mut index = BTreeMap::new();
    for job in &pipeline.jobs {
        index
            .entry(job.name.as_str())
            .or_insert_with(|| graph.add_node(job.name.as_str()));
    }
    for job in &pipeline.jobs {
        for need in &job.needs {
            if need == &job.name {
                continue;
            }
            if let Some(&from) = index.get(need.as_str()) {
                graph.update_edge(from, index[job.name.as_str()], ());
            }
        }
    }
    let mut out: Vec<Vec<String>> = tarjan_scc(&graph)
        .into_iter()
        .filter(|scc| scc.len() > 1)
        .map(|scc| {
            let mut names: Vec<String> = scc.into_iter().map(|n| graph[n].to_string()).collect();
            names.sort();
            names
        })
        .collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_yaml_hash, Job, Trigger, TriggerType, VariableScope};

    fn base(stages: &[&str], jobs: Vec<Job>) -> Pipeline {
        Pipeline {
            git_ref: "main".into(),
            commit_sha: "0".into(),
            file_path: ".gitlab-ci.yml".into(),
            yaml_hash: compute_yaml_hash(b""),
            stage_order: stages.iter().map(|s| s.to_string()).collect(),
            jobs,
            templates: vec![],
            variables: vec![],
            triggers: vec![],
        }
    }

    fn job(name: &str, stage: &str, needs: &[&str]) -> Job {
        let mut j = Job::new(name, stage);
        j.needs = needs.iter().map(|s| s.to_string()).collect();
        j
    }

    #[test]
    fn empty_pipeline_is_vacuously_valid() {
        assert!(validate(&base(&[], vec![])).is_valid());
    }

    #[test]
    fn two_job_cycle_is_one_violation() {
        let p = base(&["s"], vec![job("A", "s", &["B"]), job("B", "s", &["A"])]);
        let report = validate(&p);
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!(v.rule, Rule::NeedsCycle);
        assert_eq!(v.entity, "A, B");
        assert!(v.message.contains("{A, B}"));
    }

    #[test]
    fn same_stage_needs_allowed_later_stage_rejected() {
        let ok = base(&["a", "b"], vec![job("x", "a", &[]), job("y", "a", &["x"])]);
        assert!(validate(&ok).is_valid());
        let bad = base(&["a", "b"], vec![job("x", "a", &["y"]), job("y", "b", &[])]);
        let r = validate(&bad);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rule, Rule::LaterStageNeed);
        assert_eq!(r.violations[0].entity, "x");
    }

    #[test]
    fn every_rule_fires_and_report_is_sorted() {
        let mut p = base(
            &["s", "s"],
            vec![
                job("z", "nowhere", &["z", "ghost"]),
                job(".hidden", "s", &[]),
                job("d", "s", &["z", "z"]),
                job("d", "s", &[]),
            ],
        );
        p.triggers = vec![
            Trigger {
                trigger_type: TriggerType::Push,
            },
            Trigger {
                trigger_type: TriggerType::Push,
            },
        ];
        p.variables = vec![
            Variable {
                key: "K".into(),
                value: "1".into(),
                scope: VariableScope::Pipeline,
            },
            Variable {
                key: "K".into(),
                value: "2".into(),
                scope: VariableScope::Pipeline,
            },
        ];
        let r = validate(&p);
        let rules: Vec<Rule> = r.violations.iter().map(|v| v.rule).collect();
        let mut sorted = rules.clone();
        sorted.sort();
        assert_eq!(rules, sorted);
        for rule in [
            Rule::DuplicateStage,
            Rule::DuplicateJob,
            Rule::InvalidJobName,
            Rule::UnknownStage,
            Rule::SelfNeed,
            Rule::DuplicateNeed,
            Rule::UnresolvedNeed,
            Rule::DuplicateVariable,
            Rule::DuplicateTrigger,
        ] {
            assert!(rules.contains(&rule), "missing {rule:?} in {r}");
        }
    }

    #[test]
    fn report_display_counts() {
        let r = validate(&base(&[], vec![]));
        assert_eq!(r.to_string(), "0 violations");
    }
}
