//! Run manifests: the serialized config, its content hash, and the hashed
//! output file list. The creation timestamp is recorded but excluded from
//! every hash so reruns with identical inputs verify identically.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::RunConfig;
use crate::rng::sha256_hex;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub config: RunConfig,
    pub config_sha256: String,
    pub outputs: Vec<OutputEntry>,
    pub created_unix: u64,
}

/// Content hash of a run config: SHA-256 over its canonical JSON encoding.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let json = serde_json::to_vec(config)
        .map_err(|e| Error::parameter(format!("config serialization failed: {e}")))?;
    Ok(sha256_hex(&json))
}

fn hash_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path)?;
    Ok((bytes.len() as u64, sha256_hex(&bytes)))
}

/// Build a manifest over output files living under `base_dir`.
pub fn build_manifest(
    config: &RunConfig,
    base_dir: &Path,
    outputs: &[PathBuf],
) -> Result<RunManifest> {
    let mut entries = Vec::with_capacity(outputs.len());
    for path in outputs {
        let (bytes, sha) = hash_file(path)?;
        let rel = path
            .strip_prefix(base_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        entries.push(OutputEntry {
            path: rel,
            bytes,
            sha256: sha,
        });
    }
    Ok(RunManifest {
        manifest_version: MANIFEST_VERSION,
        config: config.clone(),
        config_sha256: config_hash(config)?,
        outputs: entries,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

pub fn write_manifest(path: &Path, manifest: &RunManifest, force: bool) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::parameter(format!("manifest serialization failed: {e}")))?;
    if !force && path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists; pass force to overwrite", path.display()),
        )));
    }
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parameter(format!("manifest parse failed: {e}")))
}

/// Recompute the config hash and every output hash; any mismatch is reported
/// in one validation error.
pub fn verify_manifest(path: &Path) -> Result<()> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut problems = Vec::new();

    let recomputed = config_hash(&manifest.config)?;
    if recomputed != manifest.config_sha256 {
        problems.push(format!(
            "config hash mismatch: stored {} recomputed {recomputed}",
            manifest.config_sha256
        ));
    }
    for entry in &manifest.outputs {
        let target = base.join(&entry.path);
        match hash_file(&target) {
            Ok((bytes, sha)) => {
                if bytes != entry.bytes {
                    problems.push(format!(
                        "{}: size {} does not match recorded {}",
                        entry.path, bytes, entry.bytes
                    ));
                }
                if sha != entry.sha256 {
                    problems.push(format!("{}: content hash mismatch", entry.path));
                }
            }
            Err(e) => problems.push(format!("{}: {e}", entry.path)),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}
