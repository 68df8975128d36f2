//! Renders a `.gitlab-ci.yml` file to BPMN XML on stdout.
//!
//! cargo run -p pipetwin-core --example render -- path/to/.gitlab-ci.yml

use pipetwin_core::parser::RawConfig;

fn main() {
    let path = std::env::args().nth(1).expect("usage: render <file>");
    let bytes = std::fs::read(&path).expect("readable input");
    let pipeline = pipetwin_core::parse(&RawConfig::from_bytes(bytes)).unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(1);
    });
    let doc = pipetwin_core::generate(&pipeline).unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(1);
    });
    print!("{}", doc.xml);
}
