use pipetwin_core::parser::RawConfig;
use pipetwin_core::{generate, parse};
use pipetwin_testkit::inspect::{check_structure, Inventory};
use pipetwin_testkit::{fixtures, xsd};

#[test]
fn corpus_has_fifty_cases() {
    assert_eq!(fixtures::validity_corpus().len(), 50);
}

#[test]
fn every_corpus_document_is_valid() {
    let corpus = fixtures::validity_corpus();
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
    assert!(failures.is_empty(), "{}", failures.join("\n"));
    let dir = tempfile::tempdir().unwrap();
    if let Err(e) = xsd::validate_documents(dir.path(), &docs) {
        panic!("{e}");
    }
}

#[test]
fn pipeline_without_jobs_still_connects_start_to_end() {
    let p = parse(&RawConfig::from_bytes(fixtures::read("corpus/17_no_jobs.yml"))).unwrap();
    let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
    assert_eq!(inv.count("task"), 0);
    assert_eq!(inv.flows.len(), 1);
    inv.check_connectivity().unwrap();
}

#[test]
fn special_characters_survive_serialization() {
    let p = parse(&RawConfig::from_bytes(fixtures::read(
        "corpus/15_xml_special_chars.yml",
    )))
    .unwrap();
    let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
    let doc = &inv.nodes["task_escape"].documentation;
    assert!(doc[0].contains(r#"<tag attr='1'> & \"quoted\" </tag>"#));
    assert!(doc[0].contains("]]>"));
}

#[test]
fn all_trigger_types_map_to_starts() {
    let p = parse(&RawConfig::from_bytes(fixtures::read("corpus/07_all_triggers.yml"))).unwrap();
    assert_eq!(p.triggers.len(), 6);
    let inv = Inventory::parse(&generate(&p).unwrap().xml).unwrap();
    assert_eq!(inv.count("startEvent"), 6);
    // push, schedule and tag_push are signals; merge_request is a message.
    assert_eq!(inv.typed_starts(), 4);
    assert_eq!(inv.signals.len(), 3);
    assert_eq!(inv.messages.len(), 1);
    assert_eq!(inv.in_degree("gw_trigger_merge"), 6);
}

#[test]
fn split_and_join_in_one_stage() {
    let p = parse(&RawConfig::from_bytes(fixtures::read("corpus/19_split_and_join.yml"))).unwrap();
    let doc = generate(&p).unwrap();
    let inv = Inventory::parse(&doc.xml).unwrap();
    assert_eq!(inv.out_degree("gw_job_split_src"), 3);
    assert_eq!(inv.in_degree("gw_job_join_merge"), 3);
    // Entries src and solo, exits merge and solo.
    assert!(inv.nodes.contains_key("gw_stage_fork_build"));
    assert!(inv.nodes.contains_key("gw_stage_join_build"));
    inv.check_gateway_balance().unwrap();
}
