//! Shared test support: fixture paths, a seeded pipeline generator, an
//! independent diff oracle, a BPMN inspector, an XSD validator wrapper,
//! run fixture builders and a mock GitLab forge.

pub mod fixtures;
pub mod forge;
pub mod gen;
pub mod inspect;
pub mod oracle;
pub mod runs;
pub mod scenario;
pub mod stress;
pub mod xsd;
