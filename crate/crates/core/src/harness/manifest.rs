use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn hash(role: impl Into<String>, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Artifact {
            role: role.into(),
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// Everything needed to rerun or audit one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_toml: String,
    pub config_digest: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_seconds: f64,
    pub artifacts: Vec<Artifact>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_toml: cfg.to_toml(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            started_unix: unix_now(),
            finished_unix: 0.0,
            wall_seconds: 0.0,
            artifacts: Vec::new(),
        }
    }

    pub fn record(&mut self, role: impl Into<String>, path: &Path) -> Result<()> {
        self.artifacts.push(Artifact::hash(role, path)?);
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished_unix = unix_now();
        self.wall_seconds = (self.finished_unix - self.started_unix).max(0.0);
    }

    /// Fails if any recorded artifact is missing or no longer matches its hash.
    pub fn verify(&self) -> Result<()> {
        for a in &self.artifacts {
            let now = Artifact::hash(a.role.clone(), &a.path)?;
            if now.sha256 != a.sha256 {
                return Err(Error::Format {
                    path: a.path.clone(),
                    reason: "artifact changed since the manifest was written".into(),
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.verify()?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
