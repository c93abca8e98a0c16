//! Run manifests: the resolved configuration, input hashes, and a run id
//! written alongside every output so downstream steps can detect
//! mixed-provenance inputs.

use crate::config::ExperimentConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use xted_core::io::{atomic_write, sha256_bytes, sha256_file};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub run_id: String,
    pub seed: u64,
    pub timestamp_ms: u64,
    pub resolved_config: ExperimentConfig,
    pub input_hashes: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
}

/// The run id is the hash of the resolved config (seed included), so every
/// stage launched from one config file shares it.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    sha256_bytes(&bytes)
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".manifest.json");
    output.with_file_name(name)
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            run_id: run_id(cfg),
            seed: cfg.seed,
            timestamp_ms: now_ms(),
            resolved_config: cfg.clone(),
            input_hashes: BTreeMap::new(),
            checkpoint_hash: None,
        }
    }

    pub fn with_input(mut self, path: &Path) -> Result<Self> {
        let h = sha256_file(path).with_context(|| format!("hashing {}", path.display()))?;
        self.input_hashes
            .insert(path.display().to_string(), h);
        Ok(self)
    }

    pub fn with_checkpoint_hash(mut self, path: &Path) -> Result<Self> {
        let h = sha256_file(path).with_context(|| format!("hashing {}", path.display()))?;
        self.checkpoint_hash = Some(h);
        Ok(self)
    }

    /// Write next to `output` as `<output>.manifest.json`.
    pub fn write_for(&self, output: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        atomic_write(&manifest_path(output), &bytes)?;
        Ok(())
    }

    pub fn load_for(output: &Path) -> Result<Self> {
        let p = manifest_path(output);
        let bytes =
            std::fs::read(&p).with_context(|| format!("reading manifest {}", p.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
