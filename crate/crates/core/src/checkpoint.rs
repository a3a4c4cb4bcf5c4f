//! Checkpoint format shared by every model.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The manifest lists tensors as `{name, shape, dtype: "f32", offset,
//! length}` (offset in bytes, length in elements) in serialization order,
//! plus the model kind, its hyperparameters and the vocabulary fingerprint.
//! `weights.bin` is the concatenation of all tensors as little-endian IEEE
//! 754 single precision, row-major, in manifest order.

use crate::nn::{Parameter, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unsupported dtype `{0}` (only f32 is defined)")]
    Dtype(String),
    #[error("tensor `{name}`: shape {shape:?} does not match length {length}")]
    ShapeLength {
        name: String,
        shape: Vec<usize>,
        length: usize,
    },
    #[error("tensor `{name}`: offset {got} does not match running layout {expected}")]
    Offset {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("weights file holds {got} bytes but the manifest describes {expected}")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint is a `{got}` model, expected `{expected}`")]
    WrongKind { expected: String, got: String },
    #[error("vocabulary fingerprint {got} does not match the loaded vocabulary {expected}")]
    VocabMismatch { expected: String, got: String },
    #[error("checkpoint is missing tensor `{0}` (wrong head or architecture?)")]
    MissingTensor(String),
    #[error("tensor `{name}`: checkpoint shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    /// Element count.
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub vocab_fingerprint: String,
    pub hyper: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

pub fn fingerprint_string(fp: u64) -> String {
    format!("{fp:016x}")
}

/// Write a checkpoint from a model's parameters, in iteration order.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    kind: &str,
    vocab_fingerprint: u64,
    hyper: &impl Serialize,
    params: &[&Parameter<F>],
) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::new();
    for p in params {
        let offset = blob.len();
        for v in &p.tensor.values {
            blob.extend_from_slice(&v.to_f32().to_le_bytes());
        }
        records.push(TensorRecord {
            name: p.name.clone(),
            shape: p.tensor.shape.clone(),
            dtype: "f32".to_string(),
            offset,
            length: p.tensor.numel(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        vocab_fingerprint: fingerprint_string(vocab_fingerprint),
        hyper: serde_json::to_value(hyper).map_err(|e| CheckpointError::Manifest(e.to_string()))?,
        tensors: records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    std::fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

/// A parsed checkpoint: manifest plus tensors decoded to f32.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub tensors: HashMap<String, Tensor<f32>>,
}

impl LoadedCheckpoint {
    /// Hyperparameters deserialized into the model's config type.
    pub fn hyper<T: for<'de> Deserialize<'de>>(&self) -> Result<T, CheckpointError> {
        serde_json::from_value(self.manifest.hyper.clone())
            .map_err(|e| CheckpointError::Manifest(format!("hyperparameters: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.manifest.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind.to_string(),
                got: self.manifest.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn expect_vocab(&self, fingerprint: u64) -> Result<(), CheckpointError> {
        let expected = fingerprint_string(fingerprint);
        if self.manifest.vocab_fingerprint != expected {
            return Err(CheckpointError::VocabMismatch {
                expected,
                got: self.manifest.vocab_fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Copy checkpoint tensors into the given parameters; every parameter
    /// must be present with a matching shape. Optimizer state is not part
    /// of the format and resets to zero.
    pub fn assign<'a, F: Scalar>(
        &self,
        params: impl IntoIterator<Item = &'a mut Parameter<F>>,
    ) -> Result<(), CheckpointError> {
        for p in params {
            let src = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| CheckpointError::MissingTensor(p.name.clone()))?;
            if src.shape != p.tensor.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.tensor.shape.clone(),
                    got: src.shape.clone(),
                });
            }
            p.tensor.values = src.values.iter().map(|v| F::from_f32(*v)).collect();
            p.tensor.grad = None;
            let n = p.tensor.numel();
            p.adam_m = vec![F::zero(); n];
            p.adam_v = vec![F::zero(); n];
            p.step_count = 0;
        }
        Ok(())
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;
    let mut tensors = HashMap::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0usize;
    for rec in &manifest.tensors {
        if rec.dtype != "f32" {
            return Err(CheckpointError::Dtype(rec.dtype.clone()));
        }
        if rec.shape.iter().product::<usize>() != rec.length {
            return Err(CheckpointError::ShapeLength {
                name: rec.name.clone(),
                shape: rec.shape.clone(),
                length: rec.length,
            });
        }
        if rec.offset != expected_offset {
            return Err(CheckpointError::Offset {
                name: rec.name.clone(),
                expected: expected_offset,
                got: rec.offset,
            });
        }
        let bytes = rec.length * 4;
        if rec.offset + bytes > blob.len() {
            return Err(CheckpointError::Truncated {
                expected: rec.offset + bytes,
                got: blob.len(),
            });
        }
        let mut values = Vec::with_capacity(rec.length);
        for i in 0..rec.length {
            let at = rec.offset + i * 4;
            values.push(f32::from_le_bytes([
                blob[at],
                blob[at + 1],
                blob[at + 2],
                blob[at + 3],
            ]));
        }
        tensors.insert(rec.name.clone(), Tensor::from_vec(rec.shape.clone(), values));
        expected_offset += bytes;
    }
    if expected_offset != blob.len() {
        return Err(CheckpointError::Truncated {
            expected: expected_offset,
            got: blob.len(),
        });
    }
    Ok(LoadedCheckpoint { manifest, tensors })
}
