//! Append-only JSON-lines log with one `RunManifest` entry per command.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub timestamp: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Input file → hex SHA-256.
    pub input_hashes: BTreeMap<String, String>,
    pub output_paths: Vec<PathBuf>,
    pub exit_status: i32,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            command: command.into(),
            args,
            config_path: None,
            seed: None,
            input_hashes: BTreeMap::new(),
            output_paths: Vec::new(),
            exit_status: 0,
            duration_s: 0.0,
        }
    }

    /// Records the hash of `path` if it can be read.
    pub fn hash_input(&mut self, path: &Path) {
        if let Ok(h) = file_sha256(path) {
            self.input_hashes.insert(path.display().to_string(), h);
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.output_paths.push(path.into());
    }

    pub fn append_to(&self, log: &Path) -> std::io::Result<()> {
        if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(log)?;
        let line = serde_json::to_string(self).map_err(std::io::Error::other)?;
        writeln!(f, "{line}")
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn read_log(log: &Path) -> std::io::Result<Vec<RunManifest>> {
    std::fs::read_to_string(log)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
