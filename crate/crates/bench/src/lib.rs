//! Synthetic CI files for the benchmarks.

use std::fmt::Write;

/// A CI file with `stages` stages of `width` jobs each. Every job after the
/// first stage needs two jobs of the previous stage.
pub fn layered_yaml(stages: usize, width: usize) -> String {
    let mut out = String::from("stages: [");
    let names: Vec<String> = (0..stages).map(|s| format!("s{s}")).collect();
    out.push_str(&names.join(", "));
    out.push_str("]\n\n.base:\n  retry: 1\n  tags: [docker]\n");
    for s in 0..stages {
        for j in 0..width {
            write!(
                out,
                "\njob-{s}-{j}:\n  extends: .base\n  stage: s{s}\n  script: [\"make step-{s}-{j}\"]\n"
            )
            .unwrap();
            if s > 0 {
                let (a, b) = (j, (j + 1) % width);
                if a == b {
                    writeln!(out, "  needs: [job-{}-{a}]", s - 1).unwrap();
                } else {
                    writeln!(out, "  needs: [job-{}-{a}, job-{}-{b}]", s - 1, s - 1).unwrap();
                }
            }
        }
    }
    out.push_str("\nworkflow:\n  rules:\n    - if: $CI_PIPELINE_SOURCE == \"push\"\n    - if: $CI_PIPELINE_SOURCE == \"merge_request_event\"\n");
    out
}

/// `layered_yaml` with one job renamed and one script changed.
pub fn edited_yaml(stages: usize, width: usize) -> String {
    layered_yaml(stages, width)
        .replace("job-0-0:", "job-0-0x:")
        .replace("job-0-0]", "job-0-0x]")
        .replace("job-0-0,", "job-0-0x,")
        .replace("make step-1-0", "make -j4 step-1-0")
}
