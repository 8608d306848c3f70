//! Run manifests and atomic file emission.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::canonical;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}

/// Hash of the canonical (key-sorted, compact) serialization of a config tree.
pub fn config_hash(tree: &Value) -> String {
    let text = serde_json::to_string(&canonical(tree)).expect("json value serializes");
    sha256_hex(text.as_bytes())
}

pub fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<OutputFile>,
}

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Emits files into one directory and records their checksums.
pub struct Emitter {
    dir: PathBuf,
    outputs: Vec<OutputFile>,
}

impl Emitter {
    pub fn new(dir: PathBuf) -> Self {
        Emitter { dir, outputs: Vec::new() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn emit(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.outputs.push(OutputFile { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    pub fn outputs(&self) -> &[OutputFile] {
        &self.outputs
    }

    /// Write `manifest.json`, which lists every file emitted before it.
    pub fn finish(self, command: &str, tree: &Value, seed: u64, started_unix: f64) -> std::io::Result<RunManifest> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config_hash(tree),
            seed,
            started_unix,
            finished_unix: unix_seconds(),
            outputs: self.outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.dir.join("manifest.json"), text.as_bytes())?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a: Value =
            serde_json::from_str(r#"{"seed": 1, "system": "ab", "orbit": {"depth": 3, "x": [0, 0]}}"#).unwrap();
        let b: Value =
            serde_json::from_str(r#"{"orbit": {"x": [0, 0], "depth": 3}, "system": "ab", "seed": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn emitter_lists_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut em = Emitter::new(dir.path().join("run"));
        em.emit("a.csv", b"x\n1\n").unwrap();
        em.emit("b.json", b"{}").unwrap();
        let m = em.finish("orbit", &Value::Null, 3, 0.0).unwrap();
        assert_eq!(m.outputs.len(), 2);
        for f in &m.outputs {
            let bytes = std::fs::read(dir.path().join("run").join(&f.path)).unwrap();
            assert_eq!(sha256_hex(&bytes), f.sha256);
        }
        assert!(dir.path().join("run/manifest.json").exists());
        assert!(!dir.path().join("run/.a.csv.tmp").exists());
    }
}
