//! The run manifest: a JSON record of which stages ran, with content digests
//! of their parameters, inputs, and outputs. Stage skipping and corruption
//! detection both work by comparing digests against this record.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One completed stage: digests of its parameters, its inputs keyed by role
/// (so the record is comparable across run directories), and its outputs
/// keyed by file name relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub params: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub created_unix: u64,
    pub version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    fn new(config_hash: &str) -> Manifest {
        let created_unix =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Manifest {
            run_id: format!("{created_unix}-{}", &config_hash[..config_hash.len().min(8)]),
            created_unix,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest from `run_dir`, keeping it only while the stored
    /// configuration hash still matches; otherwise (or when absent) starts a
    /// fresh manifest, so a configuration change invalidates every stage.
    pub fn load_or_new(run_dir: &Path, config_hash: &str) -> Result<Manifest, CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::io("reading manifest", &path, e))?;
            let stored: Manifest = serde_json::from_str(&text).map_err(|e| {
                CliError::Validation(format!("corrupt manifest {}: {e}", path.display()))
            })?;
            if stored.config_hash == config_hash {
                return Ok(stored);
            }
            log::info!("configuration changed; starting a fresh manifest");
        }
        Ok(Manifest::new(config_hash))
    }

    /// Writes atomically (temp file + rename) so a crash never leaves a
    /// truncated manifest behind.
    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| CliError::io("writing manifest", &tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io("replacing manifest", &path, e))?;
        Ok(())
    }
}

/// Streaming SHA-256 of a file, rendered as `sha256:<hex>`.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let file = File::open(path).map_err(|e| CliError::io("hashing", path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| CliError::io("hashing", path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

/// Digest of a stage's parameter JSON.
pub fn params_digest(params: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(params).expect("params serialize");
    format!("sha256:{}", hex::encode(Sha256::digest(canonical.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_a_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(
            file_digest(&path).unwrap(),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn save_and_reload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::new("deadbeefcafe0123");
        manifest.stages.insert(
            "infer-dev".into(),
            StageEntry {
                params: "sha256:p".into(),
                inputs: BTreeMap::from([("dataset".to_string(), "sha256:i".to_string())]),
                outputs: BTreeMap::from([(
                    "records-dev.jsonl".to_string(),
                    "sha256:o".to_string(),
                )]),
            },
        );
        manifest.save(dir.path()).unwrap();
        let reloaded = Manifest::load_or_new(dir.path(), "deadbeefcafe0123").unwrap();
        assert_eq!(reloaded.run_id, manifest.run_id);
        assert_eq!(reloaded.stages, manifest.stages);
        assert!(reloaded.run_id.ends_with("-deadbeef"));
    }

    #[test]
    fn changed_config_hash_discards_the_stored_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::new("aaaaaaaaaaaaaaaa");
        manifest.stages.insert(
            "x".into(),
            StageEntry {
                params: "sha256:p".into(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        );
        manifest.save(dir.path()).unwrap();
        let fresh = Manifest::load_or_new(dir.path(), "bbbbbbbbbbbbbbbb").unwrap();
        assert!(fresh.stages.is_empty());
        assert_eq!(fresh.config_hash, "bbbbbbbbbbbbbbbb");
    }

    #[test]
    fn corrupt_manifest_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        let err = Manifest::load_or_new(dir.path(), "cc").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
