//! Run manifests and output locks.
//!
//! Every command writes `<primary output>.manifest.json` listing the inputs
//! and outputs with their SHA-256 digests, the resolved seed, format versions
//! and the full configuration snapshot. Manifests carry no timestamps, so
//! re-running a command reproduces them byte for byte.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, CHECKPOINT_VERSION, DATASET_VERSION, FOREST_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.display().to_string(), sha256: io::sha256_file(path)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub oilad_version: String,
    pub formats: BTreeMap<String, u32>,
    pub seed: u64,
    pub config: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64, config_toml: String) -> Self {
        let formats =
            [("dataset", DATASET_VERSION), ("checkpoint", CHECKPOINT_VERSION), ("forest", FOREST_VERSION)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
        Self {
            command: command.into(),
            args,
            oilad_version: env!("CARGO_PKG_VERSION").into(),
            formats,
            seed,
            config: config_toml,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn path_for(primary: &Path) -> PathBuf {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn write(&self, primary: &Path) -> Result<PathBuf> {
        let path = Self::path_for(primary);
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Pipeline(e.to_string()))?;
        bytes.push(b'\n');
        io::atomic_write(&path, &bytes)?;
        Ok(path)
    }
}

/// Exclusive claim on an output path, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(output: &Path) -> Result<Self> {
        let mut s = output.as_os_str().to_owned();
        s.push(".lock");
        let path = PathBuf::from(s);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(output.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.bin");
        let a = OutputLock::acquire(&out).unwrap();
        assert!(matches!(OutputLock::acquire(&out), Err(Error::Locked(_))));
        drop(a);
        OutputLock::acquire(&out).unwrap();
    }
}
