//! Run manifests: what ran, with which settings, on which inputs, producing
//! which outputs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_seconds: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|source| CliError::File { path: path.display().to_string(), source })?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn artifacts(paths: &[PathBuf]) -> CliResult<Vec<Artifact>> {
    paths
        .iter()
        .map(|p| Ok(Artifact { path: p.display().to_string(), sha256: sha256_file(p)? }))
        .collect()
}

/// Collects a manifest for one command as it runs.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self { command: command.into(), config, seed, inputs: Vec::new(), outputs: Vec::new(), started: Instant::now() }
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.config = config;
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(self, path: &Path) -> CliResult<RunManifest> {
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: artifacts(&self.inputs)?,
            outputs: artifacts(&self.outputs)?,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        write_file(path, text.as_bytes())?;
        Ok(m)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::File { path: path.display().to_string(), source })
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::File { path: path.display().to_string(), source })
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::File { path: path.display().to_string(), source })
}

/// Manifest path for a single-file artifact: `<file>.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
