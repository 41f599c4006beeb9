//! Run manifests and atomic file output.
//!
//! Every subcommand that writes artifacts also writes exactly one
//! `run_manifest.json` capturing the resolved configuration, the SHA-256
//! digests of every input file, and the tool version. Together with the
//! seeds embedded in the config, a manifest fully determines a re-run;
//! only the timestamp varies.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use matchrec_core::Result;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub timestamp: String,
    pub threads: usize,
    pub inputs: BTreeMap<String, InputDigest>,
    /// All resolved configuration values, after file + flag merging.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, threads: usize, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            threads,
            inputs: BTreeMap::new(),
            config,
        }
    }

    /// Record an input file under `label`, hashing its current contents.
    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(
            label.to_string(),
            InputDigest { path: path.display().to_string(), sha256: sha256_file(path)? },
        );
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&out_dir.join("run_manifest.json"), &bytes)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

/// Write via a temp file in the same directory, then rename into place, so a
/// crash never leaves a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
