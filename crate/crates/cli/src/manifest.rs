//! Per-run record of stages and the files they produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
    /// Paths relative to the manifest directory.
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    /// Loads the manifest in `dir` or starts an empty one.
    pub fn open(dir: &Path, config_hash: &str, seed: Option<u64>) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut m = if path.is_file() {
            serde_json::from_slice::<RunManifest>(&fs::read(&path)?)?
        } else {
            RunManifest {
                config_hash: String::new(),
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                stages: BTreeMap::new(),
                dir: PathBuf::new(),
            }
        };
        m.dir = dir.to_path_buf();
        m.config_hash = config_hash.to_string();
        m.seed = seed;
        Ok(m)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn begin(&mut self, stage: &str) -> Result<(), CliError> {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash: self.config_hash.clone(),
                started: now(),
                finished: None,
                artifacts: Vec::new(),
            },
        );
        self.write()
    }

    /// Marks `stage` finished with every file under `paths` (files or
    /// directories, relative to the manifest directory) as its artifacts.
    pub fn finish(&mut self, stage: &str, paths: &[&str]) -> Result<(), CliError> {
        let mut artifacts = Vec::new();
        for p in paths {
            collect_files(&self.dir, Path::new(p), &mut artifacts)?;
        }
        artifacts.sort();
        let rec = self
            .stages
            .get_mut(stage)
            .ok_or_else(|| CliError::Other(format!("stage '{stage}' finished before it began")))?;
        rec.finished = Some(now());
        rec.artifacts = artifacts;
        self.write()
    }

    /// Whether `stage` finished under the current configuration.
    pub fn is_done(&self, stage: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|r| r.finished.is_some() && r.config_hash == self.config_hash)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.stages.values().flat_map(|r| r.artifacts.iter().map(String::as_str))
    }
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
    let full = root.join(rel);
    if full.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&full)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            collect_files(root, &rel.join(e.file_name()), out)?;
        }
    } else if full.is_file() {
        out.push(rel.to_string_lossy().replace('\\', "/"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::open(dir.path(), "abc", Some(3)).unwrap();
        m.begin("gen-data").unwrap();
        let on_disk = RunManifest::open(dir.path(), "abc", Some(3)).unwrap();
        assert_eq!(on_disk.stages["gen-data"].finished, None);
        assert!(!on_disk.is_done("gen-data"));
        fs::create_dir_all(dir.path().join("sub/inner")).unwrap();
        fs::write(dir.path().join("sub/inner/b.txt"), "b").unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        m.finish("gen-data", &["sub", "a.txt"]).unwrap();
        let again = RunManifest::open(dir.path(), "abc", Some(3)).unwrap();
        assert!(again.is_done("gen-data"));
        assert_eq!(again.artifacts().collect::<Vec<_>>(), ["a.txt", "sub/inner/b.txt"]);
        let other = RunManifest::open(dir.path(), "def", Some(3)).unwrap();
        assert!(!other.is_done("gen-data"));
    }
}
