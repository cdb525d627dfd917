//! On-disk formats.
//!
//! | artifact   | format                                                        |
//! |------------|---------------------------------------------------------------|
//! | dataset    | JSON Lines; header `{"oilad_dataset_version":1}`, then one trajectory per line |
//! | checkpoint | binary: magic, version, architecture JSON, length-prefixed little-endian `f64` arrays |
//! | forest     | JSON object tagged with `oilad_forest_version`                |
//!
//! Every writer goes through [`atomic_write`], so readers never observe a
//! partially written file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use oilad_core::autodiff::Tensor;
use oilad_core::eval::VerdictRule;
use oilad_core::features::WindowConfig;
use oilad_core::iforest::IsoForest;
use oilad_core::policy::{PolicyConfig, TransformerPolicy};
use oilad_core::traj::{Dataset, Trajectory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FOREST_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OILADCK\0";

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    oilad_dataset_version: u32,
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(&DatasetHeader { oilad_dataset_version: DATASET_VERSION })
        .map_err(|e| Error::Pipeline(e.to_string()))?;
    out.push(b'\n');
    for t in &data.trajectories {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::Pipeline(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    atomic_write(path, &encode_dataset(data)?)
}

/// Reads a dataset file. An empty file is an empty dataset.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), path)
}

pub fn parse_dataset(reader: impl BufRead, path: &Path) -> Result<Dataset> {
    let mut trajectories = Vec::new();
    let mut header_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: line_no, msg };
        if !header_seen {
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let Some(v) = value.get("oilad_dataset_version") else {
                return Err(parse_err("missing `oilad_dataset_version` header".into()));
            };
            if v.as_u64() != Some(u64::from(DATASET_VERSION)) {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    what: "dataset",
                    found: v.to_string(),
                    supported: DATASET_VERSION,
                });
            }
            header_seen = true;
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        trajectories.push(t);
    }
    Ok(Dataset::new(trajectories))
}

pub fn encode_checkpoint(model: &TransformerPolicy) -> Vec<u8> {
    let arch = serde_json::to_vec(&model.config).expect("policy config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
        for x in p.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("truncated checkpoint (needed {n} bytes at offset {})", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TransformerPolicy> {
    let fmt = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(fmt("not an oilad checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            what: "checkpoint",
            found: version.to_string(),
            supported: CHECKPOINT_VERSION,
        });
    }
    let arch_len = c.u32()? as usize;
    let config: PolicyConfig =
        serde_json::from_slice(c.take(arch_len)?).map_err(|e| fmt(format!("architecture record: {e}")))?;
    let count = c.u32()? as usize;
    let layout = config.layout();
    if count != layout.len() {
        return Err(fmt(format!("{count} arrays stored, architecture expects {}", layout.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let (rows, cols) = (c.u32()? as usize, c.u32()? as usize);
        if [rows, cols] != *shape {
            return Err(fmt(format!("array {name} has shape {rows}x{cols}, expected {}x{}", shape[0], shape[1])));
        }
        let raw = c.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        params.push(Tensor::new(rows, cols, data)?);
    }
    if c.pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(TransformerPolicy::from_parts(config, params)?)
}

pub fn write_checkpoint(path: &Path, model: &TransformerPolicy) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model))
}

pub fn read_checkpoint(path: &Path) -> Result<TransformerPolicy> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Fitted boundary together with the feature settings it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestFile {
    pub oilad_forest_version: u32,
    pub window: WindowConfig,
    pub verdict: VerdictRule,
    pub forest: IsoForest,
}

impl ForestFile {
    pub fn new(window: WindowConfig, verdict: VerdictRule, forest: IsoForest) -> Self {
        Self { oilad_forest_version: FOREST_VERSION, window, verdict, forest }
    }
}

pub fn encode_forest(f: &ForestFile) -> Result<Vec<u8>> {
    serde_json::to_vec(f).map_err(|e| Error::Pipeline(e.to_string()))
}

pub fn write_forest(path: &Path, f: &ForestFile) -> Result<()> {
    atomic_write(path, &encode_forest(f)?)
}

pub fn read_forest(path: &Path) -> Result<ForestFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    match value.get("oilad_forest_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FOREST_VERSION) => {}
        other => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                what: "forest",
                found: other.map_or_else(|| "<missing>".into(), |v| v.to_string()),
                supported: FOREST_VERSION,
            })
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

/// One step of a streamed trajectory (`score --follow` input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub traj_id: String,
    pub s: Vec<f64>,
    pub a: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use oilad_core::traj::{Label, Step};

    fn sample() -> Dataset {
        let t = Trajectory {
            id: "a".into(),
            label: Label::PolicyAnomaly,
            steps: vec![Step { s: vec![0.1, 1.0 / 3.0], a: 2 }, Step { s: vec![-0.0, 1e-300], a: 0 }],
            meta: [("k".to_string(), "v".to_string())].into_iter().collect(),
        };
        Dataset::new(vec![t])
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let d = sample();
        let bytes = encode_dataset(&d).unwrap();
        let back = parse_dataset(&bytes[..], Path::new("x")).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn dataset_errors_carry_line_numbers_and_versions() {
        let empty = parse_dataset(&b""[..], Path::new("x")).unwrap();
        assert!(empty.is_empty());
        let bad = b"{\"oilad_dataset_version\":1}\n{\"id\":\"a\"}\n";
        assert!(matches!(parse_dataset(&bad[..], Path::new("x")), Err(Error::Parse { line: 2, .. })));
        let v2 = b"{\"oilad_dataset_version\":2}\n";
        assert!(matches!(parse_dataset(&v2[..], Path::new("x")), Err(Error::Version { .. })));
        let none = b"{\"id\":\"a\"}\n";
        assert!(matches!(parse_dataset(&none[..], Path::new("x")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let cfg = PolicyConfig { embed_dim: 8, ffn_dim: 8, max_seq_len: 16, ..PolicyConfig::small(3, 4) };
        let m = TransformerPolicy::new(cfg, 5).unwrap();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, m);
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut], Path::new("m")).is_err(), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_checkpoint(&v2, Path::new("m")), Err(Error::Version { .. })));
    }
}
