//! Artifact plumbing shared by all commands: JSON I/O, config digests, the
//! per-directory run manifest and the writer lock.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".geoflow.lock";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// SHA-256 of the compact JSON form. Object keys come out sorted because
/// `serde_json::Value` maps are ordered, so the digest ignores field order.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("configs serialize to JSON");
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<String>,
    /// Paths relative to the directory holding the manifest.
    pub outputs: Vec<String>,
    pub duration_s: f64,
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Input(format!(
                "{} is locked by another run (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Collects what a command read and wrote, then writes the manifest.
pub struct RunRecord {
    command: &'static str,
    config_sha256: String,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl RunRecord {
    pub fn start<T: Serialize>(command: &'static str, config: &T, seed: Option<u64>) -> Self {
        RunRecord {
            command,
            config_sha256: config_hash(config),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(paths);
    }

    /// Writes `manifest_path`; outputs are stored relative to its directory.
    pub fn finish(self, manifest_path: &Path) -> Result<()> {
        let root = manifest_path.parent().unwrap_or(Path::new(""));
        let mut outputs: Vec<String> = self
            .outputs
            .iter()
            .map(|p| p.strip_prefix(root).unwrap_or(p).display().to_string())
            .collect();
        outputs.sort();
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_sha256: self.config_sha256,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            outputs,
            duration_s: self.started.elapsed().as_secs_f64(),
        };
        write_json(manifest_path, &manifest)
    }
}

/// Sidecar manifest for a single-file output: `report.json` gets `report.manifest.json`.
pub fn sidecar_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    out.with_file_name(format!("{stem}.{MANIFEST}"))
}
