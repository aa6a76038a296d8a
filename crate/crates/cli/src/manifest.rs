use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use rvg_core::dataio::write_atomic;
use rvg_core::{Error, Result, RunConfig};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation. Contains no timestamps, so identical
/// invocations produce identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    /// Digest over every input path and content, in path order.
    pub input_hash: String,
    pub outputs: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: &[PathBuf]) -> Result<Self> {
        let mut inputs: Vec<InputDigest> = inputs
            .iter()
            .filter(|p| p.exists())
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: file_digest(p)?,
                })
            })
            .collect::<Result<_>>()?;
        inputs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut h = Sha256::new();
        for i in &inputs {
            h.update(i.path.as_bytes());
            h.update([0]);
            h.update(i.sha256.as_bytes());
        }
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config: config.clone(),
            inputs,
            input_hash: hex(&h.finalize()),
            outputs: Vec::new(),
        })
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&path, &json)?;
        Ok(path)
    }
}
