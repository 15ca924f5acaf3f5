//! Run directory: `runs/<config-hash>/<stage>/` plus `config.json`,
//! `manifest.json` and a lock file held while a command writes.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checksums of every artifact, keyed by stage directory then file name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub config_sha256: String,
    pub stages: BTreeMap<String, BTreeMap<String, String>>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| CliError::Config(format!("bad manifest {}: {e}", path.display()))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::io(path, e)),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    /// Reads `stage/file` under `dir` after checking it against the manifest.
    pub fn load(&self, dir: &Path, stage: &str, file: &str, what: &str) -> Result<Vec<u8>> {
        let expected = self
            .stages
            .get(stage)
            .and_then(|files| files.get(file))
            .ok_or_else(|| CliError::MissingArtifact(what.to_string()))?;
        let path = dir.join(stage).join(file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(CliError::MissingArtifact(what.to_string()))
            }
            Err(e) => return Err(CliError::io(path, e)),
        };
        if &sha256_hex(&bytes) != expected {
            return Err(CliError::Corrupt(path));
        }
        Ok(bytes)
    }
}

/// Exclusive lock on a directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::io(path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Files produced by one stage, collected before the manifest is updated.
#[derive(Debug, Default)]
pub struct StageOutput {
    files: BTreeMap<String, Vec<u8>>,
}

impl StageOutput {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let text = serde_json::to_string_pretty(value).expect("report serialises");
        self.add(name, (text + "\n").into_bytes());
    }
}

/// An open, locked run directory.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
    manifest: Manifest,
    _lock: DirLock,
}

impl RunDir {
    /// Creates or reopens the directory for `config`. A stored config whose
    /// hash differs from the directory name is an error.
    pub fn open(config: &RunConfig) -> Result<Self> {
        let hash = config.hash();
        let root = config.run_dir();
        fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        let lock = DirLock::acquire(&root)?;

        let config_path = root.join(CONFIG_FILE);
        let canonical = serde_json::to_string_pretty(&canonical_value(config)).expect("config serialises") + "\n";
        match fs::read_to_string(&config_path) {
            Ok(stored) => {
                let found = RunConfig::from_json(&stored)?.hash();
                if found != hash {
                    return Err(CliError::HashMismatch {
                        dir: root,
                        expected: hash,
                        found,
                    });
                }
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {
                fs::write(&config_path, &canonical).map_err(|e| CliError::io(&config_path, e))?;
            }
            Err(e) => return Err(CliError::io(config_path, e)),
        }
        let manifest = match Manifest::read(&root)? {
            Some(m) if m.config_hash != hash => {
                return Err(CliError::HashMismatch {
                    dir: root,
                    expected: hash,
                    found: m.config_hash,
                })
            }
            Some(m) => m,
            None => Manifest {
                config_hash: hash.clone(),
                config_sha256: sha256_hex(canonical.as_bytes()),
                stages: BTreeMap::new(),
            },
        };
        Ok(Self {
            root,
            hash,
            manifest,
            _lock: lock,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn load(&self, stage: &str, file: &str, what: &str) -> Result<Vec<u8>> {
        self.manifest.load(&self.root, stage, file, what)
    }

    /// Replaces the stage directory with `output` and records its checksums.
    pub fn commit(&mut self, stage: &str, output: StageOutput) -> Result<()> {
        let dir = self.root.join(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut sums = BTreeMap::new();
        for (name, bytes) in output.files {
            let path = dir.join(&name);
            fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
            sums.insert(name, sha256_hex(&bytes));
        }
        self.manifest.stages.insert(stage.to_string(), sums);
        self.manifest.write(&self.root)
    }
}

/// Resolved config with the output directory left out.
pub fn canonical_value(config: &RunConfig) -> serde_json::Value {
    serde_json::from_str(&config.canonical_json()).expect("canonical config is JSON")
}
