//! Tool registry: formal tool descriptions, versioning and publication state.
//!
//! A version moves `Draft -> Built -> Published`. Only a published version is
//! executable, and once published neither the spec nor the image reference
//! can change.

pub mod config;
pub mod hyperparams;
pub mod schema;
pub mod version;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::pipeline::ReleaseSummary;

pub use config::{parse_tool_config, render_tool_config, ConfigError};
pub use hyperparams::{validate_hyperparameters, Assignment, HyperValue, ParamError};
pub use schema::{DataKind, HyperparameterDef, PortSchema, ToolId, ToolSpec, ToolType, ValueKind};
pub use version::VersionLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VersionState {
    Draft,
    Built,
    Published,
}

/// An immutable-once-published snapshot of a tool's contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolVersion {
    pub tool_id: ToolId,
    pub version: VersionLabel,
    pub spec: ToolSpec,
    pub state: VersionState,
    pub image_ref: Option<String>,
    pub release_summary_ref: Option<Digest>,
}

impl ToolVersion {
    pub fn content_hash(&self) -> Digest {
        Digest::of_json(self)
    }

    pub fn is_published(&self) -> bool {
        self.state == VersionState::Published
    }

    pub fn key(&self) -> VersionKey {
        VersionKey { tool_id: self.tool_id.clone(), version: self.version }
    }
}

/// `(tool-id, version)` pair identifying one tool version.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VersionKey {
    pub tool_id: ToolId,
    pub version: VersionLabel,
}

impl std::fmt::Display for VersionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.tool_id, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionSelector {
    Exact(VersionLabel),
    LatestPublished,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("version {version} of tool `{tool_id}` is not greater than existing {existing}")]
    DuplicateVersion { tool_id: ToolId, version: VersionLabel, existing: VersionLabel },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("tool `{tool_id}` version {selector} not found")]
    NotFound { tool_id: ToolId, selector: String },
    #[error("{0} is not built")]
    NotBuilt(VersionKey),
    #[error("release summary records a failed stage {stage}: {reason}")]
    FailedSummary { stage: String, reason: String },
    #[error("{0} is published and immutable")]
    Immutable(VersionKey),
    #[error("{0} can only be edited as a draft")]
    NotDraft(VersionKey),
    #[error("registry storage error: {0}")]
    Storage(String),
}

impl From<std::io::Error> for RegistryError {
    fn from(e: std::io::Error) -> Self {
        RegistryError::Storage(e.to_string())
    }
}

#[derive(Default)]
struct Tables {
    tools: BTreeMap<ToolId, BTreeMap<VersionLabel, ToolVersion>>,
    summaries: BTreeMap<Digest, ReleaseSummary>,
}

/// Shared tool registry. Reads run concurrently; every mutation holds the
/// write lock, which linearizes register and publish per tool id.
pub struct Registry {
    tables: RwLock<Tables>,
    root: Option<PathBuf>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry { tables: RwLock::new(Tables::default()), root: None }
    }

    /// Opens a registry persisted under `<data_root>/registry`, loading any
    /// existing version snapshots.
    pub fn open(data_root: &Path) -> Result<Self, RegistryError> {
        let root = data_root.join("registry");
        fs::create_dir_all(&root)?;
        let mut tables = Tables::default();
        for tool_dir in fs::read_dir(&root)? {
            let tool_dir = tool_dir?.path();
            if !tool_dir.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&tool_dir)? {
                let path = entry?.path();
                match path.extension().and_then(|e| e.to_str()) {
                    Some("spec") => {
                        let v: ToolVersion = serde_json::from_slice(&fs::read(&path)?)
                            .map_err(|e| RegistryError::Storage(format!("{}: {e}", path.display())))?;
                        tables.tools.entry(v.tool_id.clone()).or_default().insert(v.version, v);
                    }
                    Some("summary") => {
                        let s: ReleaseSummary = serde_json::from_slice(&fs::read(&path)?)
                            .map_err(|e| RegistryError::Storage(format!("{}: {e}", path.display())))?;
                        tables.summaries.insert(Digest::of_json(&s), s);
                    }
                    _ => {}
                }
            }
        }
        Ok(Registry { tables: RwLock::new(tables), root: Some(root) })
    }

    fn persist(&self, v: &ToolVersion) -> Result<(), RegistryError> {
        if let Some(root) = &self.root {
            let dir = root.join(v.tool_id.as_str());
            fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.spec", v.version));
            write_atomic(&path, &serde_json::to_vec_pretty(v).expect("serializable"))?;
        }
        Ok(())
    }

    fn persist_summary(&self, key: &VersionKey, s: &ReleaseSummary) -> Result<(), RegistryError> {
        if let Some(root) = &self.root {
            let dir = root.join(key.tool_id.as_str());
            fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.summary", key.version));
            write_atomic(&path, &serde_json::to_vec_pretty(s).expect("serializable"))?;
        }
        Ok(())
    }

    /// Registers a new Draft version. The label must exceed every existing
    /// label of the same tool.
    pub fn register_tool(&self, spec: ToolSpec, version: VersionLabel) -> Result<ToolVersion, RegistryError> {
        spec.check().map_err(RegistryError::SchemaViolation)?;
        let mut t = self.tables.write().unwrap();
        let versions = t.tools.entry(spec.tool_id.clone()).or_default();
        if let Some((&existing, _)) = versions.iter().next_back() {
            if version <= existing {
                return Err(RegistryError::DuplicateVersion { tool_id: spec.tool_id.clone(), version, existing });
            }
        }
        let v = ToolVersion {
            tool_id: spec.tool_id.clone(),
            version,
            spec,
            state: VersionState::Draft,
            image_ref: None,
            release_summary_ref: None,
        };
        self.persist(&v)?;
        versions.insert(version, v.clone());
        Ok(v)
    }

    fn with_version_mut<R>(
        &self,
        key: &VersionKey,
        f: impl FnOnce(&mut ToolVersion, &mut BTreeMap<Digest, ReleaseSummary>) -> Result<R, RegistryError>,
    ) -> Result<R, RegistryError> {
        let mut guard = self.tables.write().unwrap();
        let Tables { tools, summaries } = &mut *guard;
        let v = tools.get_mut(&key.tool_id).and_then(|vs| vs.get_mut(&key.version)).ok_or_else(|| {
            RegistryError::NotFound { tool_id: key.tool_id.clone(), selector: key.version.to_string() }
        })?;
        if v.state == VersionState::Published {
            return Err(RegistryError::Immutable(key.clone()));
        }
        let mut draft = v.clone();
        let r = f(&mut draft, summaries)?;
        self.persist(&draft)?;
        *v = draft;
        Ok(r)
    }

    /// Replaces the spec of a Draft version.
    pub fn update_spec(&self, key: &VersionKey, spec: ToolSpec) -> Result<ToolVersion, RegistryError> {
        spec.check().map_err(RegistryError::SchemaViolation)?;
        if spec.tool_id != key.tool_id {
            return Err(RegistryError::SchemaViolation("tool id cannot change".into()));
        }
        self.with_version_mut(key, |v, _| {
            if v.state != VersionState::Draft {
                return Err(RegistryError::NotDraft(key.clone()));
            }
            v.spec = spec;
            Ok(v.clone())
        })
    }

    /// Records a successful image build for a Draft or Built version.
    pub fn mark_built(&self, key: &VersionKey, image_ref: &str) -> Result<ToolVersion, RegistryError> {
        self.with_version_mut(key, |v, _| {
            v.state = VersionState::Built;
            v.image_ref = Some(image_ref.to_string());
            Ok(v.clone())
        })
    }

    /// Publishes a Built version whose release summary shows every
    /// mandatory pipeline stage succeeded.
    pub fn publish_version(&self, key: &VersionKey, summary: &ReleaseSummary) -> Result<ToolVersion, RegistryError> {
        let v = self.with_version_mut(key, |v, summaries| {
            if v.state != VersionState::Built {
                return Err(RegistryError::NotBuilt(key.clone()));
            }
            if let Err((stage, reason)) = summary.check_gates() {
                return Err(RegistryError::FailedSummary { stage, reason });
            }
            let digest = Digest::of_json(summary);
            summaries.insert(digest, summary.clone());
            v.state = VersionState::Published;
            v.image_ref = Some(summary.image_name.clone());
            v.release_summary_ref = Some(digest);
            Ok(v.clone())
        })?;
        self.persist_summary(key, summary)?;
        Ok(v)
    }

    pub fn lookup_version(&self, tool_id: &ToolId, selector: VersionSelector) -> Result<ToolVersion, RegistryError> {
        let t = self.tables.read().unwrap();
        let not_found = || RegistryError::NotFound {
            tool_id: tool_id.clone(),
            selector: match selector {
                VersionSelector::Exact(v) => v.to_string(),
                VersionSelector::LatestPublished => "latest-published".into(),
            },
        };
        let versions = t.tools.get(tool_id).ok_or_else(not_found)?;
        let found = match selector {
            VersionSelector::Exact(v) => versions.get(&v),
            VersionSelector::LatestPublished => versions.values().rev().find(|v| v.is_published()),
        };
        found.cloned().ok_or_else(not_found)
    }

    pub fn get(&self, key: &VersionKey) -> Result<ToolVersion, RegistryError> {
        self.lookup_version(&key.tool_id, VersionSelector::Exact(key.version))
    }

    pub fn release_summary(&self, digest: &Digest) -> Option<ReleaseSummary> {
        self.tables.read().unwrap().summaries.get(digest).cloned()
    }

    /// Validates an assignment against a registered version's schema.
    pub fn validate_hyperparameters(
        &self,
        key: &VersionKey,
        assignment: &Assignment,
    ) -> Result<Assignment, RegistryError> {
        let v = self.get(key)?;
        validate_hyperparameters(&v.spec, assignment).map_err(|e| RegistryError::SchemaViolation(e.to_string()))
    }

    /// Every version of every tool, ordered by tool id then version.
    pub fn list(&self) -> Vec<ToolVersion> {
        let t = self.tables.read().unwrap();
        t.tools.values().flat_map(|vs| vs.values().cloned()).collect()
    }
}

/// Resolves tool versions for graph validation and execution.
pub trait VersionResolver {
    fn resolve(&self, key: &VersionKey) -> Option<ToolVersion>;
}

impl VersionResolver for Registry {
    fn resolve(&self, key: &VersionKey) -> Option<ToolVersion> {
        self.get(key).ok()
    }
}

impl VersionResolver for BTreeMap<VersionKey, ToolVersion> {
    fn resolve(&self, key: &VersionKey) -> Option<ToolVersion> {
        self.get(key).cloned()
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
