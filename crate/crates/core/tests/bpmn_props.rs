use std::collections::BTreeMap;

use pipetwin_core::bpmn::BpmnError;
use pipetwin_core::model::{Job, Trigger, TriggerType, WhenPolicy};
use pipetwin_core::parser::RawConfig;
use pipetwin_core::{compute_yaml_hash, generate, parse, Pipeline};
use pipetwin_testkit::gen;
use pipetwin_testkit::inspect::Inventory;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn pipeline(stages: &[&str], jobs: Vec<Job>, triggers: &[TriggerType]) -> Pipeline {
    Pipeline {
        git_ref: "main".into(),
        commit_sha: String::new(),
        file_path: ".gitlab-ci.yml".into(),
        yaml_hash: compute_yaml_hash(b""),
        stage_order: stages.iter().map(|s| s.to_string()).collect(),
        jobs,
        templates: Vec::new(),
        variables: Vec::new(),
        triggers: triggers.iter().map(|t| Trigger { trigger_type: *t }).collect(),
    }
}

fn job(name: &str, stage: &str, needs: &[&str]) -> Job {
    let mut j = Job::new(name, stage);
    j.script = vec![format!("run {name}")];
    j.needs = needs.iter().map(|s| s.to_string()).collect();
    j
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn coverage_connectivity_and_balance(seed in any::<u64>()) {
        let p = gen::random_pipeline(&mut gen::seeded(seed), 8);
        let doc = generate(&p).unwrap();
        let inv = Inventory::parse(&doc.xml).unwrap();
        prop_assert_eq!(inv.count("task") + inv.count("userTask"), p.jobs.len());
        let manual = p.jobs.iter().filter(|j| j.when == WhenPolicy::Manual).count();
        prop_assert_eq!(inv.count("userTask"), manual);
        let names: Vec<String> = p.jobs.iter().map(|j| j.name.clone()).collect();
        prop_assert_eq!(inv.activity_names().into_iter().collect::<Vec<_>>(), names);
        if let Err(e) = inv.check_all() {
            prop_assert!(false, "{}", e);
        }
    }

    #[test]
    fn layout_is_monotone_along_needs(seed in any::<u64>()) {
        let p = gen::random_pipeline(&mut gen::seeded(seed), 8);
        let doc = generate(&p).unwrap();
        let inv = Inventory::parse(&doc.xml).unwrap();
        let shape = |name: &str| inv.shapes[&doc.element_index[name]];
        for j in &p.jobs {
            for n in &j.needs {
                let (a, b) = (shape(n), shape(&j.name));
                if p.job(n).unwrap().stage == j.stage {
                    prop_assert!(a.y < b.y, "{} above {}", n, j.name);
                    prop_assert_eq!(a.x, b.x);
                } else {
                    prop_assert!(a.x < b.x, "{} left of {}", n, j.name);
                }
            }
        }
    }

    #[test]
    fn lanes_do_not_overlap_and_contain_their_nodes(seed in any::<u64>()) {
        let p = gen::random_pipeline(&mut gen::seeded(seed), 8);
        let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
        let lanes: Vec<_> = inv.lanes.iter().map(|(id, _, refs)| (inv.shapes[id], refs)).collect();
        for (i, (a, _)) in lanes.iter().enumerate() {
            for (b, _) in &lanes[i + 1..] {
                prop_assert!(!a.overlaps(b));
            }
        }
        for (bounds, refs) in &lanes {
            for id in refs.iter() {
                let s = inv.shapes[id];
                prop_assert!(s.y >= bounds.y && s.y + s.height <= bounds.y + bounds.height, "{} leaves its lane", id);
                prop_assert!(s.x >= bounds.x && s.x + s.width <= bounds.x + bounds.width);
            }
        }
        let shapes: Vec<_> = inv.nodes.keys().map(|id| (id, inv.shapes[id])).collect();
        for (i, (ia, a)) in shapes.iter().enumerate() {
            for (ib, b) in &shapes[i + 1..] {
                prop_assert!(!a.overlaps(b), "{} overlaps {}", ia, ib);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_under_declaration_order(seed in any::<u64>()) {
        let mut rng = gen::seeded(seed);
        let p = gen::random_pipeline(&mut rng, 8);
        let canonical = generate(&parse(&RawConfig::from_bytes(gen::to_yaml(&p))).unwrap()).unwrap();
        for _ in 0..3 {
            prop_assert_eq!(&generate(&p).unwrap().xml, &canonical.xml);
        }
        let mut order: Vec<usize> = (0..p.jobs.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = parse(&RawConfig::from_bytes(gen::to_yaml_ordered(&p, &order))).unwrap();
        prop_assert_eq!(&generate(&shuffled).unwrap().xml, &canonical.xml);
    }
}

/// Every acyclic needs relation over three jobs in one stage.
fn three_job_topologies() -> Vec<BTreeMap<&'static str, Vec<&'static str>>> {
    let names = ["A", "B", "C"];
    let pairs: Vec<(usize, usize)> = (0..3)
        .flat_map(|a| (0..3).map(move |b| (a, b)))
        .filter(|(a, b)| a != b)
        .collect();
    let mut out = Vec::new();
    for mask in 0u32..(1 << pairs.len()) {
        let mut needs: BTreeMap<&str, Vec<&str>> = names.iter().map(|n| (*n, Vec::new())).collect();
        for (bit, (from, to)) in pairs.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                needs.get_mut(names[*to]).unwrap().push(names[*from]);
            }
        }
        let p = pipeline(
            &["build"],
            names.iter().map(|n| job(n, "build", &needs[n])).collect(),
            &[],
        );
        if pipetwin_core::validate(&p).is_valid() {
            out.push(needs);
        }
    }
    out
}

#[test]
fn three_job_same_stage_topologies() {
    let topologies = three_job_topologies();
    // 25 acyclic labeled digraphs on 3 nodes.
    assert_eq!(topologies.len(), 25);
    for needs in topologies {
        let p = pipeline(
            &["build"],
            needs.iter().map(|(n, ns)| job(n, "build", ns)).collect(),
            &[],
        );
        let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
        let succs = |n: &str| needs.values().filter(|ns| ns.contains(&n)).count();
        let entries = needs.values().filter(|ns| ns.is_empty()).count();
        let exits = needs.keys().filter(|n| succs(n) == 0).count();
        let joins = needs.values().filter(|ns| ns.len() >= 2).count();
        let splits = needs.keys().filter(|n| succs(n) >= 2).count();
        let expected = usize::from(entries >= 2) + usize::from(exits >= 2) + joins + splits;
        assert_eq!(inv.count("parallelGateway"), expected, "{needs:?}");
        for (n, ns) in &needs {
            let task = format!("task_{n}");
            assert_eq!(inv.in_degree(&task), 1, "{needs:?}");
            if ns.len() >= 2 {
                assert_eq!(inv.in_degree(&format!("gw_job_join_{n}")), ns.len());
            }
        }
        inv.check_all().unwrap_or_else(|e| panic!("{needs:?}: {e}"));
    }
}

#[test]
fn join_gateway_for_two_same_stage_needs() {
    let p = pipeline(
        &["build"],
        vec![
            job("A", "build", &[]),
            job("B", "build", &[]),
            job("C", "build", &["A", "B"]),
        ],
        &[],
    );
    let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
    assert_eq!(inv.in_degree("gw_job_join_C"), 2);
    assert!(inv
        .flows
        .iter()
        .any(|f| f.source == "gw_job_join_C" && f.target == "task_C"));
}

#[test]
fn trigger_sets_of_size_zero_to_two() {
    let typed = |t: &TriggerType| !matches!(t, TriggerType::Api | TriggerType::Web);
    let mut sets: Vec<Vec<TriggerType>> = vec![vec![]];
    for (i, a) in TriggerType::ALL.iter().enumerate() {
        sets.push(vec![*a]);
        for b in &TriggerType::ALL[i + 1..] {
            sets.push(vec![*a, *b]);
        }
    }
    assert_eq!(sets.len(), 1 + 6 + 15);
    for set in sets {
        let p = pipeline(&["build"], vec![job("A", "build", &[])], &set);
        let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
        assert_eq!(inv.count("startEvent"), set.len().max(1), "{set:?}");
        assert_eq!(inv.typed_starts(), set.iter().filter(|t| typed(t)).count(), "{set:?}");
        assert_eq!(inv.count("exclusiveGateway"), usize::from(set.len() >= 2), "{set:?}");
        inv.check_all().unwrap();
    }
}

#[test]
fn single_job_is_start_task_end() {
    let p = pipeline(&["build"], vec![job("A", "build", &[])], &[]);
    let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
    assert_eq!(inv.nodes.len(), 3);
    assert_eq!(inv.count("parallelGateway") + inv.count("exclusiveGateway"), 0);
    assert_eq!(inv.nodes["start"].event_definition, None);
    assert_eq!(inv.flows.len(), 2);
}

#[test]
fn unconstrained_jobs_are_ordered_by_name() {
    for jobs in [
        vec![job("b", "build", &[]), job("a", "build", &[])],
        vec![job("a", "build", &[]), job("b", "build", &[])],
    ] {
        let inv = Inventory::parse(&generate(&pipeline(&["build"], jobs, &[])).unwrap().xml).unwrap();
        assert!(inv.shapes["task_a"].y < inv.shapes["task_b"].y);
    }
}

#[test]
fn every_when_policy_maps_to_one_activity_kind() {
    for w in WhenPolicy::ALL {
        let mut j = job("x", "build", &[]);
        j.when = *w;
        j.script = vec!["one".into(), "two".into()];
        let inv = Inventory::parse(&generate(&pipeline(&["build"], vec![j], &[])).unwrap().xml).unwrap();
        let node = &inv.nodes["task_x"];
        let expected = if *w == WhenPolicy::Manual { "userTask" } else { "task" };
        assert_eq!(node.kind, expected, "{w}");
        assert_eq!(node.documentation[0], "one\ntwo");
    }
}

#[test]
fn sanitization_collision_is_reported() {
    let p = pipeline(
        &["build"],
        vec![job("a b", "build", &[]), job("a-b", "build", &[])],
        &[],
    );
    match generate(&p) {
        Err(BpmnError::SanitizationCollision { first, second, id, .. }) => {
            assert_eq!(id, "a_b");
            assert_eq!([first.as_str(), second.as_str()], ["a b", "a-b"]);
        }
        other => panic!("expected a collision, got {other:?}"),
    }
}

#[test]
fn invalid_models_are_refused() {
    let p = pipeline(
        &["build"],
        vec![job("a", "build", &["b"]), job("b", "build", &["a"])],
        &[],
    );
    assert!(matches!(generate(&p), Err(BpmnError::Invalid(_))));
}
