//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use pipetwin_core::analytics::{aggregate, delta, FailureCategory, VersionMetrics, METRICS_SCHEMA};
use pipetwin_core::model::{TriggerType, WhenPolicy};
use pipetwin_core::parser::RawConfig;
use pipetwin_core::{diff, generate, parse};
use pipetwin_testkit::inspect::{check_structure, Inventory};
use pipetwin_testkit::oracle::{from_engine, oracle_diff};
use pipetwin_testkit::{fixtures, gen, runs, scenario, stress, xsd};

type Check = Result<String, String>;

fn ensure(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn java_app_round_trip() -> Check {
    let start = Instant::now();
    let p = parse(&fixtures::raw("java_app.yml")).map_err(|e| e.to_string())?;
    let doc = generate(&p).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let manual: Vec<&str> = p
        .jobs
        .iter()
        .filter(|j| j.when == WhenPolicy::Manual)
        .map(|j| j.name.as_str())
        .collect();
    ensure(p.stage_order.len() == 4, format!("{} stages", p.stage_order.len()))?;
    ensure(p.jobs.len() == 5, format!("{} jobs", p.jobs.len()))?;
    ensure(p.templates.len() == 1, format!("{} templates", p.templates.len()))?;
    ensure(
        p.trigger_types() == [TriggerType::Push, TriggerType::MergeRequest],
        format!("triggers {:?}", p.trigger_types()),
    )?;
    ensure(manual == ["deploy"], format!("manual jobs {manual:?}"))?;

    let inv = Inventory::parse(&doc.xml)?;
    let counts = [
        ("lanes", inv.lanes.len(), 4),
        ("tasks", inv.count("task"), 4),
        ("user tasks", inv.count("userTask"), 1),
        ("parallel forks", inv.gateways("parallelGateway", "Diverging").len(), 1),
        ("parallel joins", inv.gateways("parallelGateway", "Converging").len(), 1),
        ("parallel gateways", inv.count("parallelGateway"), 2),
        ("start events", inv.count("startEvent"), 2),
        ("typed start events", inv.typed_starts(), 2),
        ("exclusive gateways", inv.count("exclusiveGateway"), 1),
        ("end events", inv.count("endEvent"), 1),
    ];
    for (what, got, want) in counts {
        ensure(got == want, format!("{got} {what}, expected {want}"))?;
    }
    inv.check_all()?;
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!(
        "4 lanes, 4+1 activities, fork/join, 2 typed starts, XOR, end in {elapsed:.1?}"
    ))
}

fn bpmn_validity() -> Check {
    let corpus = fixtures::validity_corpus();
    ensure(corpus.len() == 50, format!("corpus has {} cases", corpus.len()))?;
    let mut docs = Vec::new();
    let mut failures = Vec::new();
    for (name, p) in &corpus {
        match generate(p) {
            Ok(doc) => {
                if let Err(e) = check_structure(name, p, &doc.xml) {
                    failures.push(e);
                }
                docs.push((name.clone(), doc.xml));
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    ensure(failures.is_empty(), failures.join("; "))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    xsd::validate_documents(dir.path(), &docs).map_err(|e| e.to_string())?;
    Ok(format!(
        "{}/{} documents schema-valid, connected and balanced",
        docs.len(),
        corpus.len()
    ))
}

fn cli_transform(path: &std::path::Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pipetwin"))
        .arg("transform")
        .arg(path)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("transform {} failed", path.display()))?;
    Ok(out.stdout)
}

fn determinism() -> Check {
    let java_app = fixtures::pipeline("java_app.yml");
    let golden = generate(&java_app).map_err(|e| e.to_string())?.xml;
    for _ in 0..3 {
        ensure(
            generate(&java_app).map_err(|e| e.to_string())?.xml == golden,
            "generate differs between runs",
        )?;
    }
    let reordered = fixtures::pipeline("java_app_reordered.yml");
    ensure(
        generate(&reordered).map_err(|e| e.to_string())?.xml == golden,
        "reordered declarations change the document",
    )?;
    let cli = cli_transform(&fixtures::path("java_app.yml"))?;
    ensure(cli == golden.as_bytes(), "cli output differs from generate")?;
    for _ in 0..2 {
        ensure(
            cli_transform(&fixtures::path("java_app.yml"))? == cli,
            "cli differs between runs",
        )?;
    }
    ensure(
        cli_transform(&fixtures::path("java_app_reordered.yml"))? == cli,
        "cli output depends on declaration order",
    )?;

    let mut rng = gen::seeded(0xde7);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut permutations = 0;
    for i in 0..40 {
        let p = gen::random_pipeline(&mut rng, 8);
        let canonical = gen::to_yaml(&p);
        let reversed: Vec<usize> = (0..p.jobs.len()).rev().collect();
        let permuted = gen::to_yaml_ordered(&p, &reversed);
        let a = generate(&parse(&RawConfig::from_bytes(canonical.clone())).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let b = generate(&parse(&RawConfig::from_bytes(permuted.clone())).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(a.xml == b.xml, format!("permutation {i} changes the document"))?;
        if i < 5 {
            let (pa, pb) = (
                dir.path().join(format!("{i}a.yml")),
                dir.path().join(format!("{i}b.yml")),
            );
            std::fs::write(&pa, canonical).map_err(|e| e.to_string())?;
            std::fs::write(&pb, permuted).map_err(|e| e.to_string())?;
            ensure(
                cli_transform(&pa)? == cli_transform(&pb)?,
                format!("cli permutation {i} differs"),
            )?;
        }
        permutations += 1;
    }
    Ok(format!(
        "3 runs identical via library and cli; {permutations} permutations identical"
    ))
}

fn diff_oracle() -> Check {
    let start = Instant::now();
    let cases = gen::diff_pairs(0xd1ff, 500);
    for (i, (a, b)) in cases.iter().enumerate() {
        ensure(
            a.jobs.len() <= 6 && b.jobs.len() <= 6,
            format!("pair {i} exceeds 6 jobs"),
        )?;
        let (ab, ba) = (diff(a, b), diff(b, a));
        ensure(
            from_engine(&ab) == oracle_diff(a, b),
            format!("pair {i} disagrees with the oracle"),
        )?;
        ensure(ab.reversed() == ba, format!("pair {i} is not symmetric"))?;
        let c = &cases[(i + 1) % cases.len()].0;
        let (bc, ac) = (diff(b, c), diff(a, c));
        ensure(
            ac.summary.jobs_delta == ab.summary.jobs_delta + bc.summary.jobs_delta
                && ac.summary.stages_delta == ab.summary.stages_delta + bc.summary.stages_delta,
            format!("pair {i} breaks the count triangle"),
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("500 pairs agree, symmetric, triangle holds in {elapsed:.1?}"))
}

fn inkscape_comparison() -> Check {
    let d = diff(
        &fixtures::pipeline("inkscape_v1.yml"),
        &fixtures::pipeline("inkscape_v2.yml"),
    );
    ensure(d.added_jobs.len() == 2, format!("{} added jobs", d.added_jobs.len()))?;
    ensure(d.removed_jobs.is_empty(), "jobs removed")?;
    ensure(
        d.modified_jobs.len() == 1,
        format!("{} modified jobs", d.modified_jobs.len()),
    )?;
    let fields = d.modified_jobs[0].field_changes.len();
    ensure(fields == 8, format!("{fields} field deltas"))?;
    ensure(
        d.added_templates.len() == 1,
        format!("{} added templates", d.added_templates.len()),
    )?;
    ensure(
        d.summary.jobs_delta == 2,
        format!("jobs delta {:+}", d.summary.jobs_delta),
    )?;
    Ok(format!(
        "+{} jobs, ~{} ({fields} fields), +{} template, jobs {:+}",
        d.added_jobs.len(),
        d.modified_jobs[0].name,
        d.added_templates.len(),
        d.summary.jobs_delta
    ))
}

fn inkscape_metrics() -> (VersionMetrics, VersionMetrics) {
    let v1 = fixtures::pipeline("inkscape_v1.yml");
    let v2 = fixtures::pipeline("inkscape_v2.yml");
    let m1 = aggregate(&v1, &runs::build_runs(&v1, &runs::v1_profile(), 1000, 0)).expect("v1 runs aggregate");
    let m2 = aggregate(&v2, &runs::build_runs(&v2, &runs::v2_profile(), 2000, 100)).expect("v2 runs aggregate");
    (m1, m2)
}

fn published(jobs: usize, rate: f64, avg: f64, build: f64, queue: f64) -> VersionMetrics {
    VersionMetrics {
        schema: METRICS_SCHEMA.into(),
        yaml_hash: String::new(),
        jobs,
        runs: 0,
        success_rate_pct: Some(rate),
        avg_duration_s: Some(avg),
        median_duration_s: None,
        stage_avg_s: [("build".to_string(), build)].into(),
        avg_queue_s: Some(queue),
        failure_categories: Default::default(),
    }
}

fn metrics_delta() -> Check {
    let (m1, m2) = inkscape_metrics();
    ensure(
        (m1.runs, m2.runs) == (16, 100),
        format!("{} and {} runs", m1.runs, m2.runs),
    )?;
    ensure(
        m1.success_rate_pct == Some(31.2) && m2.success_rate_pct == Some(61.0),
        format!("rates {:?} / {:?}", m1.success_rate_pct, m2.success_rate_pct),
    )?;
    let d = delta(
        &published(15, 31.2, 2550.0, 614.0, 3.1),
        &published(17, 61.0, 2709.0, 453.0, 50.2),
    );
    let shown = |m: &str| d.row(m).map(|r| r.display.clone()).unwrap_or_default();
    let want = [
        ("success_rate_pct", "+29.8 pp"),
        ("avg_duration_s", "+6.2%"),
        ("stage_avg_s.build", "-26.2%"),
        ("avg_queue_s", "+1519%"),
    ];
    for (metric, expected) in want {
        ensure(shown(metric) == expected, format!("{metric} shows {}", shown(metric)))?;
    }
    Ok("31.2% (5/16), 61.0% (61/100); +29.8 pp, +6.2%, -26.2%, +1519%".into())
}

fn failure_categories() -> Check {
    let (_, m2) = inkscape_metrics();
    let c = |k| m2.failure_categories.get(&k).copied().unwrap_or(0);
    let got = (
        c(FailureCategory::Script),
        c(FailureCategory::Infrastructure),
        c(FailureCategory::Other),
    );
    ensure(got == (19, 2, 0), format!("categories {got:?}"))?;
    Ok("script 19, infrastructure 2, other 0".into())
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime")
}

fn twin_loop() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = runtime().block_on(scenario::twin_loop(&dir.path().join("store.json")))?;
    ensure(r.passed(), format!("{r:?}"))?;
    ensure(r.elapsed < Duration::from_secs(5), format!("took {:?}", r.elapsed))?;
    Ok(format!(
        "{} models, {} BPMN entries, {} generations, {} change events, idempotent replay in {:.1?}",
        r.models, r.bpmn_entries, r.generations, r.change_events, r.elapsed
    ))
}

fn pubsub() -> Check {
    let r = runtime().block_on(stress::run(4, 4, 1000, 8));
    ensure(r.passed(), format!("{r:?}"))?;
    Ok(format!(
        "{} envelopes to each of {} subscribers in order, no replay, lossless backpressure",
        r.published,
        r.delivered.len()
    ))
}

type Criterion = (&'static str, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("java_app round-trip", java_app_round_trip),
        ("BPMN validity", bpmn_validity),
        ("determinism", determinism),
        ("diff oracle", diff_oracle),
        ("inkscape-shaped comparison", inkscape_comparison),
        ("metrics delta arithmetic", metrics_delta),
        ("failure categorization", failure_categories),
        ("twin loop", twin_loop),
        ("pub/sub contract", pubsub),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
