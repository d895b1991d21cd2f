use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of_bytes(path: String, bytes: &[u8]) -> Self {
        Self {
            path,
            sha256: format!("{:x}", Sha256::digest(bytes)),
        }
    }
}

/// Written next to the outputs of every command. Output paths are relative
/// to the output directory, so identical runs give identical manifests.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub config: serde_json::Value,
}

/// Writes `bytes` to `out/name` and returns its artifact record.
pub fn write_output(out: &Path, name: &str, bytes: &[u8]) -> Result<Artifact> {
    let p = out.join(name);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
    Ok(Artifact::of_bytes(name.to_string(), bytes))
}

/// Hashes files already written under `out`, e.g. by the checkpoint writer.
pub fn hash_output(out: &Path, name: &str) -> Result<Artifact> {
    let p = out.join(name);
    let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(Artifact::of_bytes(name.to_string(), &bytes))
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_output(out, RUN_MANIFEST, json.as_bytes())?;
        Ok(())
    }
}
