//! Checkpoint directories: `manifest.json` plus raw little-endian `f64` data.
//!
//! The manifest lists one entry per array (name, shape, dtype, byte offset,
//! file name) and carries a free-form `metadata` object used for stage
//! bookkeeping. Values round-trip bit-exactly, including infinities.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const DATA_FILE: &str = "arrays.bin";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub fn write(dir: &Path, arrays: &[(&str, &Tensor)], metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: bytes.len() as u64,
            file: DATA_FILE.into(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, metadata, arrays: entries };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported schema_version {}",
            path.display(),
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Reads every array in manifest order.
pub fn read(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest = read_manifest(dir)?;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    let mut cache: Option<(String, Vec<u8>)> = None;
    for entry in &manifest.arrays {
        if entry.dtype != "f64" {
            return Err(Error::InvalidInput(format!("array {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        if cache.as_ref().map(|(f, _)| f != &entry.file).unwrap_or(true) {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            cache = Some((entry.file.clone(), bytes));
        }
        let bytes = &cache.as_ref().expect("loaded above").1;
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > bytes.len() {
            return Err(Error::InvalidInput(format!("array {}: data file too short", entry.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::NEG_INFINITY, 1e-310]).unwrap();
        let b = Tensor::scalar(std::f64::consts::PI);
        write(dir.path(), &[("a", &a), ("b", &b)], serde_json::json!({"kind": "test"})).unwrap();
        let (manifest, arrays) = read(dir.path()).unwrap();
        assert_eq!(manifest.metadata["kind"], "test");
        assert_eq!(arrays[0].0, "a");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&arrays[0].1), bits(&a));
        assert_eq!(bits(&arrays[1].1), bits(&b));
        assert_eq!(arrays[1].1.shape(), &[] as &[usize]);
        assert_eq!(manifest.arrays[1].offset, 32);
    }

    #[test]
    fn missing_dir_is_io_error() {
        let err = read(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
