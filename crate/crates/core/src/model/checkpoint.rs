//! Weight checkpoints: a JSON manifest plus a sidecar file of little-endian
//! f32 tensors concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::io::{atomic_write, decode_f32, encode_f32};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const SLOTS_TENSOR: &str = "summary_slots";

/// Base weights plus the learned summary-slot embeddings, when trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub summary_slots: Option<Array2<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    payload: String,
    tensors: Vec<TensorEntry>,
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    ckpt.weights.for_each_tensor(|name, shape, data| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        encode_f32(data.iter().copied(), &mut payload);
    });
    if let Some(slots) = &ckpt.summary_slots {
        tensors.push(TensorEntry {
            name: SLOTS_TENSOR.to_string(),
            shape: slots.shape().to_vec(),
        });
        encode_f32(slots.iter().copied(), &mut payload);
    }
    let bin = sidecar_path(path);
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ckpt.weights.config.clone(),
        payload: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    atomic_write(&bin, &payload)?;
    atomic_write(path, &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: CHECKPOINT_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let bin = path.with_file_name(&manifest.payload);
    let bytes = fs::read(&bin)?;
    let floats = decode_f32(&bytes);
    let declared: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != declared * 4 {
        return Err(Error::corrupt(
            &bin,
            format!("payload is {} bytes, manifest declares {}", bytes.len(), declared * 4),
        ));
    }

    let mut weights = ModelWeights::init(&manifest.config)
        .map_err(|e| Error::corrupt(path, format!("config: {e}")))?;
    let mut entries = manifest.tensors.iter();
    let mut offset = 0;
    let mut mismatch = None;
    weights.for_each_tensor_mut(|name, shape, data| {
        if mismatch.is_some() {
            return;
        }
        match entries.next() {
            Some(e) if e.name == name && e.shape == shape => {
                data.copy_from_slice(&floats[offset..offset + data.len()]);
                offset += data.len();
            }
            other => {
                mismatch = Some(format!(
                    "expected tensor {name} {shape:?}, found {:?}",
                    other.map(|e| (&e.name, &e.shape))
                ))
            }
        }
    });
    if let Some(reason) = mismatch {
        return Err(Error::corrupt(path, reason));
    }
    let summary_slots = match entries.next() {
        None => None,
        Some(e) if e.name == SLOTS_TENSOR && e.shape.len() == 2 && e.shape[1] == manifest.config.d_model => {
            let n = e.shape[0] * e.shape[1];
            let slots = Array2::from_shape_vec((e.shape[0], e.shape[1]), floats[offset..offset + n].to_vec())
                .expect("shape checked");
            Some(slots)
        }
        Some(e) => return Err(Error::corrupt(path, format!("unexpected tensor {}", e.name))),
    };
    if entries.next().is_some() {
        return Err(Error::corrupt(path, "trailing tensors in manifest"));
    }
    Ok(Checkpoint {
        weights,
        summary_slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let weights = ModelWeights::init(&ModelConfig::default()).unwrap();
        let slots = Array2::from_shape_fn((4, 64), |(i, j)| ((i * 64 + j) as f32 * 0.01) as f64);
        let ckpt = Checkpoint {
            weights,
            summary_slots: Some(slots),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.weights.bitwise_eq(&ckpt.weights));
        assert_eq!(back.summary_slots, ckpt.summary_slots);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = Checkpoint {
            weights: ModelWeights::init(&ModelConfig::default()).unwrap(),
            summary_slots: None,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let bin = path.with_extension("bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn version_mismatch_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = Checkpoint {
            weights: ModelWeights::init(&ModelConfig::default()).unwrap(),
            summary_slots: None,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
