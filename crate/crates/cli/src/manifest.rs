use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every artifact. Deliberately carries no
/// timestamps or host details so identical runs give identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_all(paths: &[PathBuf], base: Option<&Path>) -> std::io::Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            let shown = base.and_then(|b| p.strip_prefix(b).ok()).unwrap_or(p);
            Ok(FileHash {
                path: shown.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            tool: "kanc",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Hashes the inputs as given and the outputs relative to `out_dir`,
    /// then writes the manifest to `path`.
    pub fn write(
        mut self,
        path: &Path,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        out_dir: Option<&Path>,
    ) -> std::io::Result<()> {
        self.inputs = hash_all(inputs, None)?;
        self.outputs = hash_all(outputs, out_dir)?;
        let mut text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(path, text)
    }
}
