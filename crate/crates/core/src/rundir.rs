//! Run directories: every artifact written through a [`RunDir`] is recorded
//! and listed in the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::util::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| crate::Error::io(&root, e))?;
        Ok(RunDir {
            root,
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, rel: &str) {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        crate::io::write_json(&self.path(rel), value)?;
        self.record(rel);
        Ok(())
    }

    pub fn write_jsonl<'a, T: Serialize + 'a>(&mut self, rel: &str, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
        crate::io::write_jsonl(&self.path(rel), items)?;
        self.record(rel);
        Ok(())
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        crate::io::write_bytes(&self.path(rel), text.as_bytes())?;
        self.record(rel);
        Ok(())
    }

    /// Records a file some other writer placed under the root.
    pub fn adopt(&mut self, rel: &str) {
        self.record(rel);
    }

    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    /// Writes the manifest, listing every artifact recorded so far.
    pub fn finish(&mut self, mut manifest: Manifest) -> Result<Manifest> {
        let mut artifacts = self.artifacts.clone();
        artifacts.sort();
        manifest.artifacts = artifacts;
        crate::io::write_json(&self.path(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Succeeded,
    Failed,
}

/// Volatile fields, kept apart so run directories can be compared byte for
/// byte after dropping this one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub excluded: Excluded,
}

pub fn module_versions() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    [
        "ehr-core",
        "cohort-builder",
        "vocab-narrative",
        "prompt-factory",
        "llm-gateway",
        "coagent-engine",
        "baselines",
        "evaluation",
        "synthgen",
        "cli-app",
    ]
    .into_iter()
    .map(|m| (m.to_string(), v.clone()))
    .collect()
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize, seeds: BTreeMap<String, u64>, started_at: String) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = sha256_hex(&[serde_json::to_string(&config)?.as_bytes()]);
        Ok(Manifest {
            command: command.to_string(),
            status: RunStatus::Succeeded,
            error: None,
            config_hash,
            config,
            seeds,
            versions: module_versions(),
            artifacts: Vec::new(),
            excluded: Excluded {
                started_at,
                finished_at: String::new(),
            },
        })
    }

    pub fn failed(mut self, error: &crate::Error) -> Self {
        self.status = RunStatus::Failed;
        self.error = Some(error.to_string());
        self
    }
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_sorted_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut rd = RunDir::create(dir.path().join("run")).unwrap();
        rd.write_text("b.txt", "x").unwrap();
        rd.write_json("a/c.json", &1).unwrap();
        rd.write_text("b.txt", "y").unwrap();
        let m = Manifest::new("t", &serde_json::json!({"k": 1}), BTreeMap::new(), "now".into()).unwrap();
        let m = rd.finish(m).unwrap();
        assert_eq!(m.artifacts, vec!["a/c.json", "b.txt"]);
        let back: Manifest = crate::io::read_json(&rd.path(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = Manifest::new("t", &serde_json::json!({"k": 1}), BTreeMap::new(), "1".into()).unwrap();
        let b = Manifest::new("t", &serde_json::json!({"k": 1}), BTreeMap::new(), "2".into()).unwrap();
        let c = Manifest::new("t", &serde_json::json!({"k": 2}), BTreeMap::new(), "1".into()).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
    }
}
