//! Single-file checkpoint container.
//!
//! Layout: an 8-byte little-endian manifest length, a JSON manifest (format
//! version, training step, model fingerprint, array table with names, shapes
//! and dtype), then the raw array data as row-major little-endian fp32 in
//! manifest order. Values are stored fp32 regardless of the in-memory scalar
//! type.

use super::params::ParamSet;
use super::real::Real;
use super::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

/// Checkpoint load/save failures.
#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// Malformed container or manifest.
    Format(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Format(msg) => write!(f, "malformed checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Run metadata stored alongside the arrays.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// Training step the parameters were captured at.
    pub step: u64,
    /// Canonical description of the model that produced the arrays; loads
    /// into a different model must be rejected by the caller.
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    fingerprint: String,
    arrays: Vec<ArrayEntry>,
}

/// Writes parameters and metadata to `path`.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    params: &ParamSet<F>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: meta.step,
        fingerprint: meta.fingerprint.clone(),
        arrays: params
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                dtype: "f32".to_string(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| CheckpointError::Format(format!("manifest encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in params.iter() {
        for &v in &t.values {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Named fp32 tensors in the order a checkpoint stores them.
pub type NamedArrays = Vec<(String, Tensor<f32>)>;

/// Reads a checkpoint back as metadata plus named fp32 tensors in stored
/// order.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, NamedArrays), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| CheckpointError::Format("file shorter than header".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)
        .map_err(|_| CheckpointError::Format("file shorter than manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CheckpointError::Format(format!("manifest decode: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        if entry.dtype != "f32" {
            return Err(CheckpointError::Format(format!(
                "array `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|_| {
            CheckpointError::Format(format!("array `{}` truncated", entry.name))
        })?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| CheckpointError::Format(format!("array `{}`: {e}", entry.name)))?;
        arrays.push((entry.name.clone(), tensor));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Format("trailing bytes after arrays".into()));
    }
    Ok((
        CheckpointMeta {
            step: manifest.step,
            fingerprint: manifest.fingerprint,
        },
        arrays,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trips() {
        let dir = std::env::temp_dir().join("ckpt_round_trip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model_10.ckpt");
        let mut ps = ParamSet::<f64>::new();
        ps.register(
            "enc.w",
            Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.25, 3.0]).unwrap(),
        );
        ps.register("enc.b", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let meta = CheckpointMeta {
            step: 10,
            fingerprint: "test-model".to_string(),
        };
        save_checkpoint(&path, &ps, &meta).unwrap();
        let (got_meta, arrays) = load_checkpoint(&path).unwrap();
        assert_eq!(got_meta, meta);
        assert_eq!(arrays.len(), 2);
        assert_eq!(arrays[0].0, "enc.w");
        assert_eq!(arrays[0].1.values, vec![1.0f32, -2.5, 0.25, 3.0]);
        assert_eq!(arrays[1].1.shape, vec![2]);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join("ckpt_truncated_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::Format(_)));
        std::fs::remove_file(&path).unwrap();
    }
}
