use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub role: String,
    pub given: PathBuf,
    pub absolute: PathBuf,
}

impl PathRecord {
    pub fn new(role: &str, given: &Path) -> Self {
        Self {
            role: role.to_string(),
            given: given.to_path_buf(),
            absolute: std::path::absolute(given).unwrap_or_else(|_| given.to_path_buf()),
        }
    }
}

/// Record of one command invocation. `config` holds the fully resolved
/// settings, which is enough to rerun the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub framework_version: String,
    pub inputs: Vec<PathRecord>,
    pub outputs: Vec<PathRecord>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
}

impl RunManifest {
    pub fn input(&self, role: &str) -> Option<&Path> {
        self.inputs.iter().find(|p| p.role == role).map(|p| p.absolute.as_path())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
