//! The running side of the pipeline twin: forge acquisition and change
//! tracking, the in-process event bus, the dual store, the orchestration
//! loop and the local HTTP API.

pub mod acquisition;
pub mod api;
pub mod bus;
pub mod orchestrator;
pub mod store;

pub use acquisition::{ChangeDetection, ConfigSnapshot, GitLabClient, ProjectHandle};
pub use bus::{Bus, Envelope, Topic};
pub use orchestrator::{Twin, TwinError};
pub use store::{Store, StoreError, StoreKey};
