//! Run manifests: what a command produced, from which inputs, when.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use a2dcdr::error::Result;
use a2dcdr::training::TrainingConfig;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainingConfig>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, dataset_fingerprint: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: String::new(),
            dataset_fingerprint,
            seed,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            artifacts: Vec::new(),
            config: None,
        }
    }

    pub fn record(&mut self, path: &Path) -> PathBuf {
        self.artifacts.push(path.display().to_string());
        path.to_path_buf()
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix_ms = now_ms();
        self.artifacts.push(path.display().to_string());
        fs::write(path, serde_json::to_string_pretty(&self).map_err(a2dcdr::Error::from)? + "\n")?;
        Ok(())
    }
}
