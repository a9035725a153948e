use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const RUN_RECORD_FILE: &str = "run.json";

/// Provenance of one command invocation, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    /// Fully resolved configuration, including derived stage seeds.
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Input path → content hash.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunRecord {
    pub fn start<C: Serialize>(command: &str, args: Vec<String>, config: &C) -> Result<Self> {
        Ok(RunRecord {
            command: command.into(),
            args,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            started_unix: now(),
            finished_unix: 0,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), content_hash(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    /// Stamps the finish time and writes the record to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now();
        fs::write(path, serde_json::to_vec_pretty(&self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Git-style blob hash (`sha256("blob <len>\0" ‖ bytes)`) for files; for
/// directories, a hash over the sorted `(name, hash)` pairs of their entries.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            let name = e
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            h.update(format!("{name}\0{}\n", content_hash(&e)?).as_bytes());
        }
    } else {
        let bytes = fs::read(path)?;
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
