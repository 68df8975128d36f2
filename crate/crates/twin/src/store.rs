//! Single-file store with an operational and an analytical namespace.
//!
//! Layout (`pipetwin.store/1`):
//!
//! ```json
//! {
//!   "format": "pipetwin.store/1",
//!   "operational": { "<key>": { "schema": "<schema id>", "value": { ... } } },
//!   "analytical":  { "<key>": { "schema": "<schema id>", "value": { ... } } }
//! }
//! ```
//!
//! Keys are `kind/<project>/<id>` with the project percent-encoded. Kinds
//! `project`, `model`, `version` and `run` live in the operational
//! namespace, `bpmn` in the analytical one. Run ids are zero-padded to 20
//! digits so keys sort numerically. Every put rewrites the file through a
//! temporary sibling and a rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use pipetwin_core::model::MODEL_SCHEMA;
use pipetwin_core::{BpmnDocument, Pipeline, PipelineRun};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acquisition::ProjectHandle;

pub const STORE_FORMAT: &str = "pipetwin.store/1";
pub const PROJECT_SCHEMA: &str = "pipetwin.project/1";
pub const VERSION_SCHEMA: &str = "pipetwin.version/1";
pub const RUN_SCHEMA: &str = "pipetwin.run/1";
pub const BPMN_SCHEMA: &str = "pipetwin.bpmn/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Namespace {
    Operational,
    Analytical,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StoreKey {
    Project { project: String },
    Model { project: String, yaml_hash: String },
    Version { project: String, yaml_hash: String },
    Run { project: String, run_id: u64 },
    Bpmn { project: String, yaml_hash: String },
}

fn encode(project: &str) -> String {
    url::form_urlencoded::byte_serialize(project.as_bytes()).collect()
}

impl StoreKey {
    pub fn model(project: &str, yaml_hash: &str) -> Self {
        StoreKey::Model {
            project: project.into(),
            yaml_hash: yaml_hash.into(),
        }
    }

    pub fn version(project: &str, yaml_hash: &str) -> Self {
        StoreKey::Version {
            project: project.into(),
            yaml_hash: yaml_hash.into(),
        }
    }

    pub fn bpmn(project: &str, yaml_hash: &str) -> Self {
        StoreKey::Bpmn {
            project: project.into(),
            yaml_hash: yaml_hash.into(),
        }
    }

    pub fn run(project: &str, run_id: u64) -> Self {
        StoreKey::Run {
            project: project.into(),
            run_id,
        }
    }

    pub fn project(project: &str) -> Self {
        StoreKey::Project {
            project: project.into(),
        }
    }

    pub fn namespace(&self) -> Namespace {
        match self {
            StoreKey::Bpmn { .. } => Namespace::Analytical,
            _ => Namespace::Operational,
        }
    }

    pub fn schema(&self) -> &'static str {
        match self {
            StoreKey::Project { .. } => PROJECT_SCHEMA,
            StoreKey::Model { .. } => MODEL_SCHEMA,
            StoreKey::Version { .. } => VERSION_SCHEMA,
            StoreKey::Run { .. } => RUN_SCHEMA,
            StoreKey::Bpmn { .. } => BPMN_SCHEMA,
        }
    }

    pub fn encode(&self) -> String {
        match self {
            StoreKey::Project { project } => format!("project/{}", encode(project)),
            StoreKey::Model { project, yaml_hash } => format!("model/{}/{yaml_hash}", encode(project)),
            StoreKey::Version { project, yaml_hash } => format!("version/{}/{yaml_hash}", encode(project)),
            StoreKey::Run { project, run_id } => format!("run/{}/{run_id:020}", encode(project)),
            StoreKey::Bpmn { project, yaml_hash } => format!("bpmn/{}/{yaml_hash}", encode(project)),
        }
    }
}

impl std::fmt::Display for StoreKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.encode())
    }
}

/// What the twin remembers about a structural version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub yaml_hash: String,
    pub commit_sha: String,
    #[serde(rename = "ref")]
    pub git_ref: String,
    /// Commit date of the earliest commit carrying this content.
    pub first_seen: DateTime<Utc>,
    pub job_count: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("{key} not found")]
    NotFound { key: String },
    #[error("{key} is corrupt: {reason}")]
    Corrupt { key: String, reason: String },
    #[error("{key} expects a {expected} value")]
    KindMismatch { key: String, expected: &'static str },
    #[error("store I/O failed: {0}")]
    Io(String),
}

type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    schema: String,
    value: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Contents {
    operational: BTreeMap<String, Entry>,
    analytical: BTreeMap<String, Entry>,
}

impl Contents {
    fn ns(&self, ns: Namespace) -> &BTreeMap<String, Entry> {
        match ns {
            Namespace::Operational => &self.operational,
            Namespace::Analytical => &self.analytical,
        }
    }

    fn ns_mut(&mut self, ns: Namespace) -> &mut BTreeMap<String, Entry> {
        match ns {
            Namespace::Operational => &mut self.operational,
            Namespace::Analytical => &mut self.analytical,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FileRepr {
    format: String,
    #[serde(flatten)]
    contents: Contents,
}

/// Linearizable per key: every operation holds one lock, writes included.
#[derive(Debug)]
pub struct Store {
    path: Option<PathBuf>,
    contents: Mutex<Contents>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            path: None,
            contents: Mutex::new(Contents::default()),
        }
    }

    /// Opens `path`, starting empty when the file does not exist yet.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let contents = match fs::read(&path) {
            Ok(bytes) => {
                let corrupt = |reason: String| StoreError::Corrupt {
                    key: path.display().to_string(),
                    reason,
                };
                let repr: FileRepr = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
                if repr.format != STORE_FORMAT {
                    return Err(corrupt(format!("format {:?}, expected {STORE_FORMAT}", repr.format)));
                }
                repr.contents
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Contents::default(),
            Err(e) => return Err(StoreError::Io(format!("{}: {e}", path.display()))),
        };
        Ok(Store {
            path: Some(path),
            contents: Mutex::new(contents),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// The exact bytes the file holds (or would hold) right now.
    pub fn to_bytes(&self) -> Vec<u8> {
        render(&self.contents.lock().unwrap())
    }

    fn persist(&self, contents: &Contents) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let io = |e: std::io::Error| StoreError::Io(format!("{}: {e}", path.display()));
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        ));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&render(contents)).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    fn put_raw(&self, items: Vec<(StoreKey, Value)>) -> Result<()> {
        let mut contents = self.contents.lock().unwrap();
        let mut changed = false;
        for (key, value) in items {
            let entry = Entry {
                schema: key.schema().to_string(),
                value,
            };
            let slot = contents.ns_mut(key.namespace()).entry(key.encode());
            match slot {
                std::collections::btree_map::Entry::Occupied(mut o) if o.get() != &entry => {
                    o.insert(entry);
                    changed = true;
                }
                std::collections::btree_map::Entry::Occupied(_) => {}
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(entry);
                    changed = true;
                }
            }
        }
        if changed {
            self.persist(&contents)?;
        }
        Ok(())
    }

    fn to_value<T: Serialize>(key: &StoreKey, value: &T) -> Result<Value> {
        serde_json::to_value(value).map_err(|e| StoreError::Corrupt {
            key: key.encode(),
            reason: e.to_string(),
        })
    }

    fn get_raw<T: DeserializeOwned>(&self, key: &StoreKey) -> Result<T> {
        let contents = self.contents.lock().unwrap();
        let encoded = key.encode();
        let entry = contents
            .ns(key.namespace())
            .get(&encoded)
            .ok_or_else(|| StoreError::NotFound { key: encoded.clone() })?;
        decode_entry(&encoded, key.schema(), entry)
    }

    pub fn contains(&self, key: &StoreKey) -> bool {
        self.contents
            .lock()
            .unwrap()
            .ns(key.namespace())
            .contains_key(&key.encode())
    }

    /// Encoded keys of `namespace` starting with `prefix`, sorted.
    pub fn keys(&self, namespace: Namespace, prefix: &str) -> Vec<String> {
        let contents = self.contents.lock().unwrap();
        contents
            .ns(namespace)
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn list<T: DeserializeOwned>(&self, namespace: Namespace, prefix: &str, schema: &str) -> Result<Vec<T>> {
        let contents = self.contents.lock().unwrap();
        contents
            .ns(namespace)
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, e)| decode_entry(k, schema, e))
            .collect()
    }

    pub fn put_project(&self, handle: &ProjectHandle) -> Result<()> {
        let key = StoreKey::project(handle.key());
        let v = Self::to_value(&key, handle)?;
        self.put_raw(vec![(key, v)])
    }

    pub fn project(&self, project: &str) -> Result<ProjectHandle> {
        self.get_raw(&StoreKey::project(project))
    }

    pub fn projects(&self) -> Result<Vec<ProjectHandle>> {
        self.list(Namespace::Operational, "project/", PROJECT_SCHEMA)
    }

    pub fn put_model(&self, project: &str, pipeline: &Pipeline) -> Result<()> {
        let key = StoreKey::model(project, &pipeline.yaml_hash);
        let v = Self::to_value(&key, pipeline)?;
        self.put_raw(vec![(key, v)])
    }

    pub fn model(&self, project: &str, yaml_hash: &str) -> Result<Pipeline> {
        self.get_raw(&StoreKey::model(project, yaml_hash))
    }

    pub fn put_version(&self, project: &str, record: &VersionRecord) -> Result<()> {
        let key = StoreKey::version(project, &record.yaml_hash);
        let v = Self::to_value(&key, record)?;
        self.put_raw(vec![(key, v)])
    }

    pub fn version(&self, project: &str, yaml_hash: &str) -> Result<VersionRecord> {
        self.get_raw(&StoreKey::version(project, yaml_hash))
    }

    /// Versions of `project`, oldest first.
    pub fn versions(&self, project: &str) -> Result<Vec<VersionRecord>> {
        let mut v: Vec<VersionRecord> = self.list(
            Namespace::Operational,
            &format!("version/{}/", encode(project)),
            VERSION_SCHEMA,
        )?;
        v.sort_by(|a, b| {
            a.first_seen
                .cmp(&b.first_seen)
                .then_with(|| a.yaml_hash.cmp(&b.yaml_hash))
        });
        Ok(v)
    }

    pub fn put_runs(&self, project: &str, runs: &[PipelineRun]) -> Result<()> {
        let items = runs
            .iter()
            .map(|r| {
                let key = StoreKey::run(project, r.run_id);
                Self::to_value(&key, r).map(|v| (key, v))
            })
            .collect::<Result<Vec<_>>>()?;
        self.put_raw(items)
    }

    pub fn run(&self, project: &str, run_id: u64) -> Result<PipelineRun> {
        self.get_raw(&StoreKey::run(project, run_id))
    }

    /// Runs of `project` by ascending id.
    pub fn runs(&self, project: &str) -> Result<Vec<PipelineRun>> {
        self.list(Namespace::Operational, &format!("run/{}/", encode(project)), RUN_SCHEMA)
    }

    pub fn put_bpmn(&self, project: &str, doc: &BpmnDocument) -> Result<()> {
        let key = StoreKey::bpmn(project, &doc.yaml_hash);
        let v = Self::to_value(&key, doc)?;
        self.put_raw(vec![(key, v)])
    }

    pub fn bpmn(&self, project: &str, yaml_hash: &str) -> Result<BpmnDocument> {
        self.get_raw(&StoreKey::bpmn(project, yaml_hash))
    }

    /// Projects that hold a model with this hash.
    pub fn projects_with_model(&self, yaml_hash: &str) -> Vec<String> {
        let suffix = format!("/{yaml_hash}");
        let contents = self.contents.lock().unwrap();
        contents
            .operational
            .keys()
            .filter(|k| k.starts_with("model/") && k.ends_with(&suffix))
            .filter_map(|k| {
                let enc = &k["model/".len()..k.len() - suffix.len()];
                url::form_urlencoded::parse(format!("p={enc}").as_bytes())
                    .next()
                    .map(|(_, v)| v.into_owned())
            })
            .collect()
    }
}

fn decode_entry<T: DeserializeOwned>(key: &str, schema: &str, entry: &Entry) -> Result<T> {
    if entry.schema != schema {
        return Err(StoreError::Corrupt {
            key: key.to_string(),
            reason: format!("schema {:?}, expected {schema}", entry.schema),
        });
    }
    T::deserialize(&entry.value).map_err(|e| StoreError::Corrupt {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn render(contents: &Contents) -> Vec<u8> {
    let repr = FileRepr {
        format: STORE_FORMAT.to_string(),
        contents: contents.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&repr).expect("store contents serialize");
    bytes.push(b'\n');
    bytes
}
