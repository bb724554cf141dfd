//! Content-addressed stage directories.
//!
//! Layout: `<root>/<stage>/<key>/` holds the stage's files and a
//! `manifest.json` listing each file with its SHA-256. A stage is complete
//! when its manifest exists; files are written to `<key>.partial` and the
//! directory is renamed into place after the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use augsens_core::Container;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Key of a stage: the hash of its name, its parameters and its upstream keys.
pub fn stage_key(stage: &str, params: &serde_json::Value, upstream: &BTreeMap<String, String>) -> String {
    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "stage": stage,
        "params": params,
        "upstream": upstream,
    });
    sha256_hex(doc.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: String,
    pub key: String,
    pub upstream: BTreeMap<String, String>,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    /// Stage-specific metadata.
    pub info: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(key)
    }

    /// The manifest of a completed stage, if any.
    pub fn completed(&self, stage: &str, key: &str) -> Result<Option<Manifest>> {
        let path = self.stage_dir(stage, key).join(MANIFEST);
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).at(&path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if m.schema_version != SCHEMA_VERSION || m.key != key || m.stage != stage {
            return Err(CliError::Corrupt {
                path,
                reason: "manifest does not match its location".into(),
            });
        }
        Ok(Some(m))
    }

    /// Starts writing a stage, discarding any earlier partial attempt.
    pub fn begin(&self, stage: &str, key: &str, seed: u64, upstream: BTreeMap<String, String>) -> Result<StageWriter> {
        let dir = self.stage_dir(stage, key);
        let partial = dir.with_extension("partial");
        if partial.exists() {
            fs::remove_dir_all(&partial).at(&partial)?;
        }
        fs::create_dir_all(&partial).at(&partial)?;
        Ok(StageWriter {
            dir,
            partial,
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                stage: stage.into(),
                key: key.into(),
                upstream,
                seed,
                files: Vec::new(),
                info: serde_json::Value::Null,
            },
        })
    }

    /// Reads a file of a completed stage and checks it against the manifest.
    pub fn read(&self, m: &Manifest, name: &str) -> Result<Vec<u8>> {
        let path = self.stage_dir(&m.stage, &m.key).join(name);
        let entry = m.files.iter().find(|f| f.name == name).ok_or_else(|| CliError::Corrupt {
            path: path.clone(),
            reason: "not listed in the manifest".into(),
        })?;
        let bytes = fs::read(&path).at(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(CliError::Corrupt {
                path,
                reason: "checksum mismatch".into(),
            });
        }
        Ok(bytes)
    }

    pub fn read_container(&self, m: &Manifest, name: &str) -> Result<Container> {
        Ok(Container::read_from(&self.read(m, name)?[..])?)
    }
}

/// An in-progress stage directory.
#[derive(Debug)]
pub struct StageWriter {
    dir: PathBuf,
    partial: PathBuf,
    manifest: Manifest,
}

impl StageWriter {
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.partial.join(name);
        fs::write(&path, bytes).at(&path)?;
        self.manifest.files.push(FileEntry {
            name: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_container(&mut self, name: &str, c: &Container) -> Result<()> {
        self.write(name, &c.to_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes the manifest and moves the stage into place.
    pub fn commit(mut self, info: serde_json::Value) -> Result<Manifest> {
        self.manifest.info = info;
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        let path = self.partial.join(MANIFEST);
        fs::write(&path, text).at(&path)?;
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).at(&self.dir)?;
        }
        fs::rename(&self.partial, &self.dir).at(&self.dir)?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_then_read_back() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::new(tmp.path());
        let up = BTreeMap::new();
        let key = stage_key("plan", &serde_json::json!({"n": 1}), &up);
        assert_ne!(key, stage_key("plan", &serde_json::json!({"n": 2}), &up));
        assert!(store.completed("plan", &key).unwrap().is_none());
        let mut w = store.begin("plan", &key, 7, up).unwrap();
        w.write("a.txt", b"hello").unwrap();
        assert!(store.completed("plan", &key).unwrap().is_none());
        let m = w.commit(serde_json::json!({"x": 1})).unwrap();
        assert_eq!(store.completed("plan", &key).unwrap().unwrap(), m);
        assert_eq!(store.read(&m, "a.txt").unwrap(), b"hello");
        fs::write(store.stage_dir("plan", &key).join("a.txt"), b"tampered").unwrap();
        assert!(matches!(store.read(&m, "a.txt"), Err(CliError::Corrupt { .. })));
    }

    #[test]
    fn containers_round_trip_bit_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::new(tmp.path());
        let mut c = Container::new();
        c.insert_f64("x", ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[3]), vec![0.1, f64::MIN_POSITIVE, -0.0]).unwrap());
        let mut w = store.begin("s", "k", 0, BTreeMap::new()).unwrap();
        w.write_container("c.aswt", &c).unwrap();
        let m = w.commit(serde_json::Value::Null).unwrap();
        let back = store.read_container(&m, "c.aswt").unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
    }
}
