//! Run manifest: config identity, seeds, artifacts and stage markers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use felicia_core::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Partition,
    Train,
    Sweep,
    Select,
    Evaluate,
    Aggregate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Partition,
        Stage::Train,
        Stage::Sweep,
        Stage::Select,
        Stage::Evaluate,
        Stage::Aggregate,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub completed: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed { stage: Stage, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Artifact name → path relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub stages: Vec<StageRecord>,
    pub wall_clock_seconds: f64,
    pub version: String,
    pub status: RunStatus,
    pub output_dir: PathBuf,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, output_dir: PathBuf) -> Self {
        Self {
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            config,
            artifacts: BTreeMap::new(),
            stages: Stage::ALL
                .iter()
                .map(|&stage| StageRecord {
                    stage,
                    completed: false,
                    seconds: 0.0,
                })
                .collect(),
            wall_clock_seconds: 0.0,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Running,
            output_dir,
        }
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stages.iter().any(|r| r.stage == stage && r.completed)
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn mark(&mut self, stage: Stage, seconds: f64) {
        if let Some(r) = self.stages.iter_mut().find(|r| r.stage == stage) {
            r.completed = true;
            r.seconds = seconds;
        }
    }

    pub fn add_artifact(&mut self, name: impl Into<String>, relative: impl Into<PathBuf>) {
        self.artifacts.insert(name.into(), relative.into());
    }

    pub fn artifact(&self, name: &str) -> Option<PathBuf> {
        self.artifacts.get(name).map(|p| self.output_dir.join(p))
    }

    pub fn save(&self) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&self.path(), &json)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| anyhow::anyhow!("cannot read manifest {}: {e}", path.display()))?;
        let mut m: Self = serde_json::from_slice(&bytes)?;
        if m.config.hash() != m.config_hash {
            anyhow::bail!(
                "manifest {} config hash does not match its embedded config",
                path.display()
            );
        }
        if let Some(dir) = path.parent() {
            m.output_dir = dir.to_path_buf();
        }
        Ok(m)
    }
}
