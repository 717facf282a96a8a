//! Long-lived control layer: registry, artifacts, run records and
//! provenance under one data root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::store::{ArtifactStore, StoreError};
use super::OrchestratorError;
use crate::digest::Digest;
use crate::lifecycle::{ErrorReport, RunRecord, RunState, Transition};
use crate::protocol::InputSource;
use crate::registry::{write_atomic, Assignment, Registry, VersionKey};

const RECORD_MAGIC: &str = "posy-record/1";

/// Stored form: one header line with the SHA-256 of the body, then the
/// JSON body.
fn frame<T: Serialize>(value: &T) -> Vec<u8> {
    let body = serde_json::to_vec_pretty(value).expect("record serializes");
    let mut out = format!("{RECORD_MAGIC} sha256:{}\n", Digest::of(&body).to_hex()).into_bytes();
    out.extend_from_slice(&body);
    out
}

fn unframe<T: DeserializeOwned>(id: &str, bytes: &[u8]) -> Result<T, OrchestratorError> {
    let corrupt = |why: &str| OrchestratorError::CorruptRecord(format!("{id}: {why}"));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not UTF-8"))?;
    let body = &bytes[nl + 1..];
    let expected = header
        .strip_prefix(RECORD_MAGIC)
        .and_then(|r| r.strip_prefix(" sha256:"))
        .ok_or_else(|| corrupt("bad header"))?;
    if expected != Digest::of(body).to_hex() {
        return Err(corrupt("checksum mismatch"));
    }
    serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))
}

/// Keyed record files, or an in-memory map of the same stored bytes.
struct RecordDir {
    dir: Option<PathBuf>,
    ext: &'static str,
    mem: RwLock<BTreeMap<String, Vec<u8>>>,
}

impl RecordDir {
    fn new(root: Option<&Path>, sub: &str, ext: &'static str) -> Result<Self, OrchestratorError> {
        let dir = match root {
            Some(r) => {
                let d = r.join(sub);
                fs::create_dir_all(&d).map_err(storage)?;
                Some(d)
            }
            None => None,
        };
        Ok(RecordDir { dir, ext, mem: RwLock::default() })
    }

    fn check_id(id: &str) -> Result<(), OrchestratorError> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(OrchestratorError::NotFound(id.to_string()))
        }
    }

    fn read(&self, id: &str) -> Result<Option<Vec<u8>>, OrchestratorError> {
        Self::check_id(id)?;
        match &self.dir {
            Some(d) => match fs::read(d.join(format!("{id}.{}", self.ext))) {
                Ok(b) => Ok(Some(b)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(storage(e)),
            },
            None => Ok(self.mem.read().unwrap().get(id).cloned()),
        }
    }

    fn write(&self, id: &str, bytes: Vec<u8>) -> Result<(), OrchestratorError> {
        Self::check_id(id)?;
        match &self.dir {
            Some(d) => write_atomic(&d.join(format!("{id}.{}", self.ext)), &bytes).map_err(storage),
            None => {
                self.mem.write().unwrap().insert(id.to_string(), bytes);
                Ok(())
            }
        }
    }

    fn ids(&self) -> Vec<String> {
        match &self.dir {
            Some(d) => {
                let mut ids: Vec<String> = fs::read_dir(d)
                    .map(|it| {
                        it.filter_map(Result::ok)
                            .filter_map(|e| {
                                let name = e.file_name().to_string_lossy().into_owned();
                                name.strip_suffix(&format!(".{}", self.ext)).map(str::to_string)
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                ids.sort();
                ids
            }
            None => self.mem.read().unwrap().keys().cloned().collect(),
        }
    }
}

fn storage(e: std::io::Error) -> OrchestratorError {
    OrchestratorError::Storage(e.to_string())
}

/// Checksum of one bound input as recorded in provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputProvenance {
    pub mechanism: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

impl InputProvenance {
    pub fn of(source: &InputSource) -> Self {
        let mechanism = source.mechanism().to_string();
        match source {
            InputSource::InContainerPath { path } => {
                InputProvenance { mechanism, checksum: None, location: Some(path.clone()) }
            }
            InputSource::UploadedFile { artifact } => {
                InputProvenance { mechanism, checksum: Some(artifact.to_hex()), location: None }
            }
            InputSource::InlinePayload { .. } => {
                let bytes = source.inline_bytes().and_then(Result::ok).unwrap_or_default();
                InputProvenance { mechanism, checksum: Some(Digest::of(&bytes).to_hex()), location: None }
            }
            InputSource::DownloadRef { uri, checksum } => {
                InputProvenance { mechanism, checksum: Some(checksum.clone()), location: Some(uri.clone()) }
            }
        }
    }
}

/// Write-once account of one terminal run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub run_id: String,
    pub tool: VersionKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_hash: Option<Digest>,
    pub image_ref: Option<String>,
    pub inputs: BTreeMap<String, InputProvenance>,
    pub hyperparameters: Assignment,
    pub outputs: BTreeMap<String, Digest>,
    pub final_state: RunState,
    pub history: Vec<Transition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
}

impl ProvenanceRecord {
    pub fn from_run(run: &RunRecord, spec_hash: Option<Digest>) -> Result<Self, OrchestratorError> {
        if !run.state.is_terminal() {
            return Err(OrchestratorError::NonTerminalRun { run_id: run.run_id.clone(), state: run.state });
        }
        Ok(ProvenanceRecord {
            run_id: run.run_id.clone(),
            tool: run.tool.clone(),
            spec_hash,
            image_ref: run.image_ref.clone(),
            inputs: run.inputs.iter().map(|(p, s)| (p.clone(), InputProvenance::of(s))).collect(),
            hyperparameters: run.config.clone(),
            outputs: run.outputs.clone(),
            final_state: run.state,
            history: run.history.clone(),
            error: run.error.clone(),
            plan_id: run.plan_id,
            node_id: run.node_id.clone(),
        })
    }

    /// The record with run id and timestamps blanked, for comparing
    /// re-executions.
    pub fn normalized(&self) -> Self {
        let mut r = self.clone();
        r.run_id.clear();
        for t in &mut r.history {
            t.at = Default::default();
        }
        r
    }
}

/// Node-to-run index of one workflow execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub execution_id: String,
    pub workflow_id: String,
    pub plan_id: Digest,
    pub order: Vec<String>,
    pub runs: BTreeMap<String, String>,
}

/// The backend facade.
pub struct Backend {
    pub registry: Registry,
    pub store: ArtifactStore,
    root: Option<PathBuf>,
    runs: RecordDir,
    provenance: RecordDir,
    executions: RecordDir,
}

impl Backend {
    pub fn in_memory() -> Self {
        Backend {
            registry: Registry::in_memory(),
            store: ArtifactStore::in_memory(),
            root: None,
            runs: RecordDir::new(None, "", "rec").expect("memory"),
            provenance: RecordDir::new(None, "", "prov").expect("memory"),
            executions: RecordDir::new(None, "", "exec").expect("memory"),
        }
    }

    pub fn open(data_root: &Path) -> Result<Self, OrchestratorError> {
        Ok(Backend {
            registry: Registry::open(data_root).map_err(|e| OrchestratorError::Storage(e.to_string()))?,
            store: ArtifactStore::open(data_root).map_err(OrchestratorError::from)?,
            root: Some(data_root.to_path_buf()),
            runs: RecordDir::new(Some(data_root), "runs", "rec")?,
            provenance: RecordDir::new(Some(data_root), "provenance", "prov")?,
            executions: RecordDir::new(Some(data_root), "executions", "exec")?,
        })
    }

    /// Opens `POSY_DATA_DIR`, or `./.posy` when unset.
    pub fn from_env() -> Result<Self, OrchestratorError> {
        let root = std::env::var_os("POSY_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".posy"));
        Self::open(&root)
    }

    pub fn data_root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Saves the latest snapshot of a run. Once a terminal snapshot is
    /// stored it can only be rewritten with identical content.
    pub fn persist_run(&self, run: &RunRecord) -> Result<(), OrchestratorError> {
        if let Some(bytes) = self.runs.read(&run.run_id)? {
            if let Ok(prev) = unframe::<RunRecord>(&run.run_id, &bytes) {
                if prev.state.is_terminal() && prev != *run {
                    return Err(OrchestratorError::TerminalRecord(run.run_id.clone()));
                }
            }
        }
        self.runs.write(&run.run_id, frame(run))
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunRecord, OrchestratorError> {
        let bytes = self.runs.read(run_id)?.ok_or_else(|| OrchestratorError::NotFound(run_id.to_string()))?;
        unframe(run_id, &bytes)
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.runs.ids()
    }

    /// Assembles and stores the provenance record of a terminal run.
    /// Recording the same run twice returns the stored record; a differing
    /// second record is rejected.
    pub fn record_provenance(&self, run: &RunRecord) -> Result<ProvenanceRecord, OrchestratorError> {
        let spec_hash = self.registry.get(&run.tool).ok().map(|v| v.content_hash());
        let record = ProvenanceRecord::from_run(run, spec_hash)?;
        for d in record.outputs.values() {
            if !self.store.contains(d) {
                return Err(OrchestratorError::Artifact(StoreError::NotFound(*d)));
            }
        }
        if let Some(bytes) = self.provenance.read(&run.run_id)? {
            let prev: ProvenanceRecord = unframe(&run.run_id, &bytes)?;
            if prev == record {
                return Ok(prev);
            }
            return Err(OrchestratorError::TerminalRecord(run.run_id.clone()));
        }
        self.provenance.write(&run.run_id, frame(&record))?;
        Ok(record)
    }

    pub fn load_provenance(&self, run_id: &str) -> Result<ProvenanceRecord, OrchestratorError> {
        let bytes = self.provenance.read(run_id)?.ok_or_else(|| OrchestratorError::NotFound(run_id.to_string()))?;
        unframe(run_id, &bytes)
    }

    pub fn persist_execution(&self, rec: &ExecutionRecord) -> Result<(), OrchestratorError> {
        self.executions.write(&rec.execution_id, frame(rec))
    }

    pub fn load_execution(&self, id: &str) -> Result<ExecutionRecord, OrchestratorError> {
        let bytes = self.executions.read(id)?.ok_or_else(|| OrchestratorError::NotFound(id.to_string()))?;
        unframe(id, &bytes)
    }

    pub fn execution_ids(&self) -> Vec<String> {
        self.executions.ids()
    }
}
