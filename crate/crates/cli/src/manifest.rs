use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// SHA-256 over the input dataset's file names and contents.
    pub data_fingerprint: Option<String>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            seed,
            config,
            data_fingerprint: None,
            artifacts: vec![],
        }
    }

    pub fn write(&self, out: &Path) -> std::io::Result<()> {
        fs::write(out.join(MANIFEST_NAME), serde_json::to_string_pretty(self).expect("manifest serializes"))
    }
}

/// Hash of every regular file directly inside `dir`, in name order.
pub fn fingerprint(dir: &Path) -> std::io::Result<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().expect("files have names").to_string_lossy().into_owned();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let body = fs::read(&f)?;
        h.update((body.len() as u64).to_le_bytes());
        h.update(&body);
    }
    Ok(hex::encode(h.finalize()))
}
