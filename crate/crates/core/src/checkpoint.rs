//! On-disk generator checkpoints.
//!
//! Layout of a store directory:
//!
//! ```text
//! manifest.json                     id -> (site, epoch, seed, architecture hash)
//! architectures/<hash>.json         layer descriptors, one per distinct network
//! site{ID}_epoch{E}_seed{S}.ckpt    "FELCKPT1", u64 LE count, f64 LE parameters
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Architecture, Network, NnError};

const MAGIC: &[u8; 8] = b"FELCKPT1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("unknown checkpoint `{0}`")]
    Unknown(String),
    #[error("corrupted checkpoint `{id}`: {reason}")]
    Corrupt { id: String, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CheckpointId(String);

impl CheckpointId {
    pub fn new(site: usize, epoch: u64, seed: u64) -> Self {
        Self(format!("site{site}_epoch{epoch}_seed{seed}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CheckpointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub site: usize,
    pub epoch: u64,
    pub seed: u64,
    pub architecture_hash: String,
}

#[derive(Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    entries: BTreeMap<CheckpointId, CheckpointEntry>,
}

/// Writes `bytes` to a temporary sibling then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

impl CheckpointStore {
    /// Opens (creating if needed) a store directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("architectures")).map_err(io_err(&dir))?;
        let manifest = dir.join(MANIFEST);
        let entries = if manifest.exists() {
            let bytes = fs::read(&manifest).map_err(io_err(&manifest))?;
            serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Manifest {
                path: manifest.clone(),
                source,
            })?
        } else {
            BTreeMap::new()
        };
        Ok(Self { dir, entries })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&CheckpointId, &CheckpointEntry)> {
        self.entries.iter()
    }

    pub fn entry(&self, id: &CheckpointId) -> Option<&CheckpointEntry> {
        self.entries.get(id)
    }

    /// Checkpoints of one site and seed, ordered by epoch.
    pub fn epochs_for(&self, site: usize, seed: u64) -> Vec<(u64, CheckpointId)> {
        let mut v: Vec<_> = self
            .entries
            .iter()
            .filter(|(_, e)| e.site == site && e.seed == seed)
            .map(|(id, e)| (e.epoch, id.clone()))
            .collect();
        v.sort();
        v
    }

    fn blob_path(&self, id: &CheckpointId) -> PathBuf {
        self.dir.join(format!("{id}.ckpt"))
    }

    pub fn save(
        &mut self,
        site: usize,
        epoch: u64,
        seed: u64,
        network: &Network,
    ) -> Result<CheckpointId, CheckpointError> {
        let id = CheckpointId::new(site, epoch, seed);
        let arch = network.architecture();
        let hash = arch.hash_hex();
        let arch_path = self.dir.join("architectures").join(format!("{hash}.json"));
        if !arch_path.exists() {
            let json = serde_json::to_vec_pretty(arch).expect("architecture serializes");
            write_atomic(&arch_path, &json).map_err(io_err(&arch_path))?;
        }
        let mut blob = Vec::with_capacity(16 + 8 * network.n_params());
        blob.extend_from_slice(MAGIC);
        blob.extend_from_slice(&(network.n_params() as u64).to_le_bytes());
        for p in network.params() {
            blob.extend_from_slice(&p.to_le_bytes());
        }
        let path = self.blob_path(&id);
        write_atomic(&path, &blob).map_err(io_err(&path))?;
        self.entries.insert(
            id.clone(),
            CheckpointEntry {
                site,
                epoch,
                seed,
                architecture_hash: hash,
            },
        );
        self.write_manifest()?;
        Ok(id)
    }

    fn write_manifest(&self) -> Result<(), CheckpointError> {
        let path = self.dir.join(MANIFEST);
        let json = serde_json::to_vec_pretty(&self.entries).expect("manifest serializes");
        write_atomic(&path, &json).map_err(io_err(&path))
    }

    pub fn load(&self, id: &CheckpointId) -> Result<Network, CheckpointError> {
        let entry = self
            .entries
            .get(id)
            .ok_or_else(|| CheckpointError::Unknown(id.to_string()))?;
        let corrupt = |reason: &str| CheckpointError::Corrupt {
            id: id.to_string(),
            reason: reason.to_string(),
        };
        let arch_path = self
            .dir
            .join("architectures")
            .join(format!("{}.json", entry.architecture_hash));
        let arch_bytes = fs::read(&arch_path).map_err(io_err(&arch_path))?;
        let arch: Architecture = serde_json::from_slice(&arch_bytes)
            .map_err(|_| corrupt("architecture file unreadable"))?;
        if arch.hash_hex() != entry.architecture_hash {
            return Err(corrupt("architecture hash mismatch"));
        }
        let path = self.blob_path(id);
        let blob = fs::read(&path).map_err(io_err(&path))?;
        if blob.len() < 16 || &blob[..8] != MAGIC {
            return Err(corrupt("bad header"));
        }
        let n = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
        if blob.len() != 16 + 8 * n {
            return Err(corrupt("truncated parameter block"));
        }
        let params = blob[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Network::from_params(arch, params)?)
    }
}
