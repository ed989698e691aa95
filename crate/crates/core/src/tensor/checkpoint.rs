//! Checkpoint format: a JSON manifest listing each tensor's name, shape and
//! byte offset, next to a raw buffer of little-endian `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fastslow-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    /// File name of the raw buffer, relative to the manifest.
    pub buffer: String,
    pub config_hash: String,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn buffer_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<manifest>` and its sibling `.bin` buffer.
pub fn save_checkpoint(
    manifest_path: &Path,
    tensors: &[(String, &Tensor)],
    config_hash: &str,
    step: u64,
) -> Result<CheckpointManifest> {
    let bin = buffer_path(manifest_path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
            len: t.numel() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        buffer: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config_hash: config_hash.to_string(),
        step,
        tensors: entries,
    };
    fs::write(&bin, &bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse { line: 1, msg: format!("unknown checkpoint format {}", manifest.format) });
    }
    let bin = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.buffer);
    let bytes = fs::read(bin)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start + 8 * e.len as usize;
        if end > bytes.len() {
            return Err(Error::Parse { line: 1, msg: format!("tensor {} runs past the buffer", e.name) });
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let a = Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::vector(vec![std::f64::consts::PI]);
        save_checkpoint(&p, &[("a".into(), &a), ("b".into(), &b)], "h", 7).unwrap();
        let (m, ts) = load_checkpoint(&p).unwrap();
        assert_eq!(m.step, 7);
        assert_eq!(m.tensors[1].offset, 32);
        for ((_, x), y) in ts.iter().zip([&a, &b]) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let first = fs::read(dir.path().join("m.bin")).unwrap();
        let (_, ts2) = load_checkpoint(&p).unwrap();
        let refs: Vec<(String, &Tensor)> = ts2.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&p, &refs, "h", 7).unwrap();
        assert_eq!(first, fs::read(dir.path().join("m.bin")).unwrap());
    }
}
