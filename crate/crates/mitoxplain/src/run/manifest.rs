//! Checksummed run manifests.
//!
//! Every stage records the files it produced and their SHA-256 digests,
//! plus a stage key derived from the relevant config slice and the keys of
//! its inputs. A stage whose key and artifacts are unchanged on disk is
//! skipped on re-run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checksum::{sha256_file, sha256_hex};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run directory.
    pub path: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Checksum over this stage's config slice and its input stage keys.
    pub key: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_checksum: String,
    pub software_version: String,
    /// Manifest write time; the only field expected to change on resume.
    pub written_unix_ms: u64,
    pub stages: Vec<StageRecord>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_checksum: String) -> RunManifest {
        RunManifest {
            config_checksum,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            written_unix_ms: now_ms(),
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn from_toml_str(text: &str) -> Result<RunManifest> {
        toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn load(run_dir: &Path) -> Result<RunManifest> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::FileNotFound(path));
        }
        RunManifest::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(run_dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Check that every listed artifact exists and matches its checksum.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for stage in &self.stages {
            verify_artifacts(run_dir, &stage.artifacts)
                .map_err(|e| e.in_stage(&stage.name))?;
        }
        Ok(())
    }
}

pub fn verify_artifacts(run_dir: &Path, artifacts: &[ArtifactRecord]) -> Result<()> {
    for artifact in artifacts {
        let path = run_dir.join(&artifact.path);
        if !path.exists() {
            return Err(Error::Manifest(format!("missing artifact {}", artifact.path)));
        }
        let actual = sha256_file(&path)?;
        if actual != artifact.checksum {
            return Err(Error::Manifest(format!(
                "checksum mismatch for {}",
                artifact.path
            )));
        }
    }
    Ok(())
}

/// Record the given files (relative to `run_dir`) with fresh checksums.
pub fn record_artifacts(run_dir: &Path, files: &[PathBuf]) -> Result<Vec<ArtifactRecord>> {
    let mut records = Vec::with_capacity(files.len());
    for file in files {
        let rel = file
            .strip_prefix(run_dir)
            .map_err(|_| Error::Manifest(format!("{} outside run dir", file.display())))?;
        records.push(ArtifactRecord {
            path: rel.to_string_lossy().replace('\\', "/"),
            checksum: sha256_file(file)?,
        });
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(records)
}

/// Stage key: digest over the stage name, its config slice and input keys.
pub fn stage_key(name: &str, config_slice: &str, input_keys: &[&str]) -> String {
    let mut text = format!("{name}\n{config_slice}\n");
    for key in input_keys {
        text.push_str(key);
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("artifact.txt");
        fs::write(&file, "payload").unwrap();
        let mut manifest = RunManifest::new("cfg".to_string());
        manifest.stages.push(StageRecord {
            name: "stage".to_string(),
            status: StageStatus::Completed,
            key: stage_key("stage", "slice", &[]),
            artifacts: record_artifacts(dir.path(), std::slice::from_ref(&file)).unwrap(),
            started_unix_ms: 1,
            finished_unix_ms: 2,
            error: None,
        });
        manifest.save(dir.path()).unwrap();
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back.stages, manifest.stages);
        back.verify(dir.path()).unwrap();

        fs::write(&file, "tampered").unwrap();
        assert!(back.verify(dir.path()).is_err());
    }

    #[test]
    fn stage_keys_change_with_config_and_inputs() {
        let a = stage_key("s", "cfg1", &[]);
        let b = stage_key("s", "cfg2", &[]);
        let c = stage_key("s", "cfg1", &["upstream"]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, stage_key("s", "cfg1", &[]));
    }
}
