//! Run manifests: what was run, with which resolved configuration, and
//! checksums of everything it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pivot_core::neural::checkpoint::write_atomic;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipCounts {
    /// Clip positions fed to the model in each epoch.
    pub per_epoch: Vec<usize>,
    pub total: usize,
    pub mean_per_epoch: f64,
}

impl ClipCounts {
    pub fn new(per_epoch: Vec<usize>) -> Self {
        let total = per_epoch.iter().sum();
        let mean_per_epoch = if per_epoch.is_empty() {
            0.0
        } else {
            total as f64 / per_epoch.len() as f64
        };
        ClipCounts {
            per_epoch,
            total,
            mean_per_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of each output file, keyed by path relative to the manifest.
    pub checksums: BTreeMap<String, String>,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_counts: Option<ClipCounts>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checksums: BTreeMap::new(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            clip_counts: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    /// Records `files` as outputs and checksums them relative to `base`.
    pub fn outputs(mut self, base: &Path, files: &[PathBuf]) -> Result<Self> {
        for f in files {
            let key = f
                .strip_prefix(base)
                .unwrap_or(f)
                .to_string_lossy()
                .into_owned();
            self.checksums.insert(key, sha256_file(f)?);
            self.outputs.push(f.clone());
        }
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("checksumming {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Regular files directly inside `dir`, sorted, manifest excluded.
pub fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let e = e?;
        let p = e.path();
        if p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn clip_counts_sum() {
        let c = ClipCounts::new(vec![3, 5]);
        assert_eq!(c.total, 8);
        assert_eq!(c.mean_per_epoch, 4.0);
    }
}
