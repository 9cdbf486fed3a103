//! Artifact bookkeeping: staged writes, content hashes and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Stage;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const PARTIAL_SUFFIX: &str = ".partial";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Hash of the stage parameters and of everything it reads.
    pub key: String,
    pub status: StageStatus,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    /// File name only, so manifests do not depend on where inputs live.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Option<Manifest> {
        let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let tmp = dir.join(format!("{MANIFEST}{PARTIAL_SUFFIX}"));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        let path = dir.join(MANIFEST);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Every artifact of every stage, in stage order.
    pub fn artifacts(&self) -> impl Iterator<Item = &Artifact> {
        self.stages.iter().flat_map(|s| s.artifacts.iter())
    }
}

/// Collects one stage's files. Each file is written with a `.partial`
/// suffix right away and renamed only when the whole stage succeeds, so a
/// failed stage leaves its partial output behind for inspection.
pub struct StageWriter {
    root: PathBuf,
    files: Vec<Artifact>,
}

impl StageWriter {
    pub fn new(root: &Path) -> Self {
        StageWriter {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let final_path = self.root.join(rel);
        if let Some(dir) = final_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let partial = partial_path(&final_path);
        fs::write(&partial, bytes).map_err(|e| Error::io(&partial, e))?;
        self.files.retain(|a| a.path != rel);
        self.files.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Serializes with `f` into memory, then stores the bytes.
    pub fn put_with(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(rel, &buf)
    }

    pub fn put_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(rel, text.as_bytes())
    }

    pub fn commit(self) -> Result<Vec<Artifact>> {
        for a in &self.files {
            let final_path = self.root.join(&a.path);
            let partial = partial_path(&final_path);
            fs::rename(&partial, &final_path).map_err(|e| Error::io(&final_path, e))?;
        }
        Ok(self.files)
    }
}

fn partial_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_os_string();
    s.push(PARTIAL_SUFFIX);
    PathBuf::from(s)
}

/// True when every artifact exists with the recorded content.
pub fn artifacts_intact(root: &Path, artifacts: &[Artifact]) -> bool {
    artifacts
        .iter()
        .all(|a| hash_file(&root.join(&a.path)).is_ok_and(|h| h == a.sha256))
}
