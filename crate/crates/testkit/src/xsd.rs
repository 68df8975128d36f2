//! Schema validation through the vendored BPMN 2.0 XSDs. The XSD import
//! graph needs a full XML Schema 1.0 processor, so this shells out to the
//! Python `xmlschema` package via `fixtures/xsd/validate.py`.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::fixtures;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum XsdError {
    /// python3 or xmlschema is missing.
    Unavailable(String),
    /// One or more documents failed, with the validator's lines for them.
    Invalid(Vec<String>),
}

impl std::fmt::Display for XsdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            XsdError::Unavailable(why) => write!(f, "XSD validator unavailable: {why}"),
            XsdError::Invalid(lines) => write!(f, "{}", lines.join("\n")),
        }
    }
}

pub fn script() -> PathBuf {
    fixtures::path("xsd/validate.py")
}

/// Validates files in one validator process.
pub fn validate_files(paths: &[PathBuf]) -> Result<(), XsdError> {
    if paths.is_empty() {
        return Ok(());
    }
    let out = Command::new("python3")
        .arg(script())
        .args(paths)
        .output()
        .map_err(|e| XsdError::Unavailable(e.to_string()))?;
    match out.status.code() {
        Some(0) => Ok(()),
        Some(3) => Err(XsdError::Unavailable(
            String::from_utf8_lossy(&out.stderr).trim().to_string(),
        )),
        _ => {
            let stdout = String::from_utf8_lossy(&out.stdout);
            let mut bad: Vec<String> = stdout
                .lines()
                .filter(|l| !l.starts_with("ok "))
                .map(String::from)
                .collect();
            if bad.is_empty() {
                bad.push(String::from_utf8_lossy(&out.stderr).trim().to_string());
            }
            Err(XsdError::Invalid(bad))
        }
    }
}

/// Writes each `(name, xml)` pair into `dir` and validates them together.
pub fn validate_documents(dir: &Path, docs: &[(String, String)]) -> Result<(), XsdError> {
    let mut paths = Vec::with_capacity(docs.len());
    for (name, xml) in docs {
        let p = dir.join(format!("{name}.bpmn"));
        std::fs::write(&p, xml).map_err(|e| XsdError::Unavailable(e.to_string()))?;
        paths.push(p);
    }
    validate_files(&paths)
}

pub fn validate_str(xml: &str) -> Result<(), XsdError> {
    let dir = tempfile::tempdir().map_err(|e| XsdError::Unavailable(e.to_string()))?;
    validate_documents(dir.path(), &[("doc".to_string(), xml.to_string())])
}
