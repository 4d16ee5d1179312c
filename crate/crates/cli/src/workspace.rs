//! Output directory handling: the run lock, file hashing and manifests.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::failure::{CliResult, Context, Failure};

pub const LOCK_FILE: &str = ".unirel.lock";

pub const VOCAB: &str = "vocab.txt";
pub const BM25: &str = "bm25.json";
pub const TRIE: &str = "trie.json";
pub const POOL: &str = "pool.json";
pub const CHECKPOINT: &str = "checkpoint.json";

/// Exclusive use of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct Workspace {
    dir: PathBuf,
    lock: PathBuf,
    outputs: Vec<String>,
}

impl Workspace {
    pub fn open(dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(dir).context(format!("creating output directory {}", dir.display()))?;
        let lock = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Failure::io(format!(
                    "{} is locked by another run; remove {} if no run is active",
                    dir.display(),
                    lock.display()
                ))
            } else {
                Failure::io(format!("creating {}: {e}", lock.display()))
            }
        })?;
        writeln!(f, "{command} {}", std::process::id())?;
        Ok(Self { dir: dir.to_path_buf(), lock, outputs: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an artifact a previous step must have produced.
    pub fn require(&self, name: &str, step: &str) -> CliResult<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Failure::missing(&p, step))
        }
    }

    /// Path for a new output, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.path(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.output(name);
        fs::write(&p, text).context(format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::contract(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, step: &str) -> CliResult<T> {
        let p = self.require(name, step)?;
        let text = fs::read_to_string(&p).context(format!("reading {}", p.display()))?;
        serde_json::from_str(&text).map_err(|e| Failure::io(format!("{} is malformed ({e}); rerun `unirel {step}`", p.display())))
    }

    /// Writes `manifest_<command>.json` listing the config, inputs and outputs.
    pub fn finish(mut self, command: &str, config: &RunConfig, inputs: BTreeMap<String, PathBuf>) -> CliResult<Manifest> {
        let config_json = serde_json::to_string(config).expect("config serializes");
        let mut input_hashes = BTreeMap::new();
        for (name, path) in inputs {
            input_hashes.insert(name, FileDigest { sha256: sha256_file(&path)?, path: path.to_string_lossy().into_owned() });
        }
        let mut outputs = BTreeMap::new();
        for name in std::mem::take(&mut self.outputs) {
            outputs.insert(name.clone(), sha256_file(&self.path(&name))?);
        }
        let manifest = Manifest {
            manifest_version: 1,
            command: command.to_string(),
            rerun: format!("unirel {command} --config {}", self.path(&manifest_name(command)).display()),
            seed: config.seed,
            config_sha256: sha256_hex(config_json.as_bytes()),
            versions: Versions {
                unirel: env!("CARGO_PKG_VERSION").to_string(),
                cli: env!("CARGO_PKG_VERSION").to_string(),
                checkpoint_format: unirel::trainer::CHECKPOINT_VERSION,
            },
            config: config.clone(),
            inputs: input_hashes,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let p = self.path(&manifest_name(command));
        fs::write(&p, text).context(format!("writing {}", p.display()))?;
        Ok(manifest)
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub unirel: String,
    pub cli: String,
    pub checkpoint_format: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub rerun: String,
    pub seed: u64,
    pub config_sha256: String,
    pub versions: Versions,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, FileDigest>,
    /// File name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).context(format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Failure::io(format!("{} is malformed: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).context(format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path(), "build").unwrap();
        let err = Workspace::open(dir.path(), "train").unwrap_err();
        assert!(err.message.contains("locked"));
        drop(ws);
        assert!(!dir.path().join(LOCK_FILE).exists());
        Workspace::open(dir.path(), "train").unwrap();
    }

    #[test]
    fn manifest_lists_outputs_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::open(dir.path(), "report").unwrap();
        ws.write_text("a.txt", "abc").unwrap();
        let m = ws.finish("report", &RunConfig::default(), BTreeMap::new()).unwrap();
        assert_eq!(m.outputs["a.txt"], "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let back = Manifest::read(&dir.path().join("manifest_report.json")).unwrap();
        assert_eq!(back, m);
    }
}
