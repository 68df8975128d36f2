//! Core algorithms of the pipeline twin: the pipeline metamodel, the GitLab
//! CI parser, BPMN 2.0 generation with diagram layout, structural
//! differencing between versions and execution-metric aggregation.

pub mod analytics;
pub mod bpmn;
pub mod diff;
pub mod model;
pub mod parser;

pub use bpmn::{generate, BpmnDocument};
pub use diff::{diff, StructuralDiff};
pub use model::{compute_yaml_hash, validate, Pipeline, PipelineRun};
pub use parser::{parse, RawConfig};
