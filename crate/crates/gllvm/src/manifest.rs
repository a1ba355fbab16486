//! Run manifests: what was run, on which inputs, and digests of what it
//! produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{to_json_bytes, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    /// File name relative to the output directory.
    pub file: String,
    pub sha256: String,
    /// Whether a rerun must reproduce the file byte for byte (timing files
    /// are not).
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved invocation; replaying it reruns the command.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<OutputDigest>,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> std::io::Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&fs::read(path)?),
    })
}

/// Collects output files as they are written atomically.
#[derive(Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
    pub outputs: Vec<OutputDigest>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&mut self, file: &str, bytes: &[u8], deterministic: bool) -> std::io::Result<()> {
        write_atomic(&self.dir.join(file), bytes)?;
        self.outputs.push(OutputDigest {
            file: file.to_string(),
            sha256: sha256_hex(bytes),
            deterministic,
        });
        Ok(())
    }

    pub fn finish(self, mut manifest: RunManifest) -> std::io::Result<RunManifest> {
        manifest.outputs = self.outputs;
        write_atomic(&self.dir.join(MANIFEST_FILE), &to_json_bytes(&manifest))?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
