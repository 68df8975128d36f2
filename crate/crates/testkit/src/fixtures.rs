use std::path::PathBuf;

use pipetwin_core::parser::{Provenance, RawConfig};
use pipetwin_core::{parse, Pipeline};

/// Directory holding the shared fixture files.
pub fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn path(name: &str) -> PathBuf {
    dir().join(name)
}

pub fn read(name: &str) -> Vec<u8> {
    let p = path(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("reading {}: {e}", p.display()))
}

pub fn read_string(name: &str) -> String {
    String::from_utf8(read(name)).expect("fixture is UTF-8")
}

pub fn raw(name: &str) -> RawConfig {
    RawConfig::new(read(name), Provenance::default())
}

pub fn pipeline(name: &str) -> Pipeline {
    parse(&raw(name)).unwrap_or_else(|e| panic!("parsing {name}: {e}"))
}

/// Hand-written edge cases, sorted by file name.
pub fn corpus() -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir().join("corpus"))
        .expect("corpus directory")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|x| x == "yml"))
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).expect("corpus file"))
        })
        .collect();
    out.sort();
    out
}

const FUZZ_CASES: usize = 25;
const FUZZ_SEED: u64 = 0x5eed_0002;

/// The hand-written cases plus seeded random pipelines, 50 in total.
pub fn validity_corpus() -> Vec<(String, Pipeline)> {
    let mut out: Vec<(String, Pipeline)> = corpus()
        .into_iter()
        .map(|(name, bytes)| {
            let p = parse(&RawConfig::from_bytes(bytes)).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name.trim_end_matches(".yml").to_string(), p)
        })
        .collect();
    let mut rng = crate::gen::seeded(FUZZ_SEED);
    for i in 0..FUZZ_CASES {
        let p = crate::gen::random_pipeline(&mut rng, 8);
        let reparsed = parse(&RawConfig::from_bytes(crate::gen::to_yaml(&p))).unwrap();
        out.push((format!("fuzz_{i:02}"), reparsed));
    }
    out
}
