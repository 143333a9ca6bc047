//! Run manifests and atomic output writing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::CliError;

/// Fields that differ between otherwise identical runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WallClock {
    pub started_unix: f64,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical config (or argument set) of the run.
    pub config_hash: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<String>,
    /// Outputs whose content is itself a wall-clock measurement.
    pub timing_outputs: Vec<String>,
    pub wall_clock: WallClock,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::usage(format!("'{}' is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Collects a command's outputs and writes them, manifest first.
pub struct RunOutputs {
    dir: PathBuf,
    command: String,
    started: Instant,
    started_unix: f64,
    files: Vec<(String, Vec<u8>)>,
    timing: Vec<String>,
}

impl RunOutputs {
    pub fn new(dir: &Path, command: &str) -> Self {
        Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
            files: Vec::new(),
            timing: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    pub fn add_timing(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.timing.push(name.to_string());
        self.add(name, bytes);
    }

    pub fn finish(self, config_hash: String, seeds: BTreeMap<String, u64>) -> Result<RunManifest, CliError> {
        std::fs::create_dir_all(&self.dir)?;
        let manifest = RunManifest {
            command: self.command,
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            outputs: self.files.iter().map(|(n, _)| n.clone()).collect(),
            timing_outputs: self.timing,
            wall_clock: WallClock {
                started_unix: self.started_unix,
                elapsed_seconds: self.started.elapsed().as_secs_f64(),
            },
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::internal(e.to_string()))?;
        write_atomic(&self.dir.join("manifest.json"), &json)?;
        for (name, bytes) in &self.files {
            write_atomic(&self.dir.join(name), bytes)?;
        }
        Ok(manifest)
    }
}
