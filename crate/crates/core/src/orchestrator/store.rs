//! Content-addressed artifact blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use crate::digest::Digest;
use crate::protocol::ArtifactSink;
use crate::registry::{write_atomic, DataKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("artifact {0} not found")]
    NotFound(Digest),
    #[error("artifact {0} does not match its address")]
    Corrupt(Digest),
    #[error("artifact storage: {0}")]
    Io(String),
}

#[derive(Clone)]
struct Blob {
    bytes: Arc<Vec<u8>>,
    kind: Option<DataKind>,
}

/// Blob map keyed by the SHA-256 of the exact bytes. With a root directory
/// blobs live in `<root>/blobs/<hex>` with the media kind in a `.kind`
/// sidecar; otherwise they stay in memory.
pub struct ArtifactStore {
    dir: Option<PathBuf>,
    mem: RwLock<BTreeMap<Digest, Blob>>,
    refs: Mutex<BTreeMap<Digest, u64>>,
}

impl ArtifactStore {
    pub fn in_memory() -> Self {
        ArtifactStore { dir: None, mem: RwLock::default(), refs: Mutex::default() }
    }

    pub fn open(data_root: &Path) -> Result<Self, StoreError> {
        let dir = data_root.join("blobs");
        fs::create_dir_all(&dir).map_err(io)?;
        Ok(ArtifactStore { dir: Some(dir), mem: RwLock::default(), refs: Mutex::default() })
    }

    fn path(&self, d: &Digest) -> Option<PathBuf> {
        self.dir.as_ref().map(|dir| dir.join(d.to_hex()))
    }

    /// Stores `bytes` and returns their address. Storing the same bytes
    /// again adds a reference but no second blob.
    pub fn store(&self, bytes: &[u8], kind: Option<DataKind>) -> Result<Digest, StoreError> {
        let d = Digest::of(bytes);
        match self.path(&d) {
            Some(p) => {
                if !p.exists() {
                    // Concurrent writers of one address write identical bytes.
                    write_atomic(&p, bytes).map_err(io)?;
                }
                if let Some(k) = kind {
                    let kp = p.with_extension("kind");
                    if !kp.exists() {
                        write_atomic(&kp, k.as_str().as_bytes()).map_err(io)?;
                    }
                }
            }
            None => {
                let mut mem = self.mem.write().unwrap();
                let blob = mem.entry(d).or_insert_with(|| Blob { bytes: Arc::new(bytes.to_vec()), kind: None });
                if blob.kind.is_none() {
                    blob.kind = kind;
                }
            }
        }
        *self.refs.lock().unwrap().entry(d).or_default() += 1;
        Ok(d)
    }

    /// Reads a blob and checks it against its address.
    pub fn get(&self, d: &Digest) -> Result<Vec<u8>, StoreError> {
        let bytes = match self.path(d) {
            Some(p) => match fs::read(&p) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(*d)),
                Err(e) => return Err(io(e)),
            },
            None => match self.mem.read().unwrap().get(d) {
                Some(b) => b.bytes.as_ref().clone(),
                None => return Err(StoreError::NotFound(*d)),
            },
        };
        if Digest::of(&bytes) != *d {
            return Err(StoreError::Corrupt(*d));
        }
        Ok(bytes)
    }

    pub fn contains(&self, d: &Digest) -> bool {
        match self.path(d) {
            Some(p) => p.exists(),
            None => self.mem.read().unwrap().contains_key(d),
        }
    }

    pub fn size(&self, d: &Digest) -> Result<usize, StoreError> {
        match self.path(d) {
            Some(p) => fs::metadata(&p).map(|m| m.len() as usize).map_err(|_| StoreError::NotFound(*d)),
            None => self.mem.read().unwrap().get(d).map(|b| b.bytes.len()).ok_or(StoreError::NotFound(*d)),
        }
    }

    pub fn kind(&self, d: &Digest) -> Option<DataKind> {
        match self.path(d) {
            Some(p) => {
                let s = fs::read_to_string(p.with_extension("kind")).ok()?;
                DataKind::ALL.into_iter().find(|k| k.as_str() == s.trim())
            }
            None => self.mem.read().unwrap().get(d).and_then(|b| b.kind),
        }
    }

    /// References taken through this handle since it was opened.
    pub fn references(&self, d: &Digest) -> u64 {
        self.refs.lock().unwrap().get(d).copied().unwrap_or(0)
    }

    /// Number of distinct blobs.
    pub fn blob_count(&self) -> usize {
        match &self.dir {
            Some(dir) => fs::read_dir(dir)
                .map(|it| {
                    it.filter_map(Result::ok)
                        .filter(|e| e.path().extension().is_none() && e.file_name().len() == 64)
                        .count()
                })
                .unwrap_or(0),
            None => self.mem.read().unwrap().len(),
        }
    }
}

impl ArtifactSink for ArtifactStore {
    fn put(&self, bytes: &[u8], kind: Option<DataKind>) -> Digest {
        // A failed write must not look like a stored artifact.
        self.store(bytes, kind).unwrap_or_else(|e| panic!("artifact store write failed: {e}"))
    }
}

fn io(e: std::io::Error) -> StoreError {
    StoreError::Io(e.to_string())
}
