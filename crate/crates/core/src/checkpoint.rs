//! Single-file model checkpoints.
//!
//! Layout: a magic line, one line of JSON header, then every tensor's values
//! as little-endian floats in header order.
//!
//! ```text
//! FAIRLENS-CHECKPOINT 1\n
//! {"kind":"topology","architecture":"...","version":"...",...}\n
//! <payload>
//! ```
//!
//! `version` hashes the architecture string and the payload, so two
//! checkpoints with identical weights share a version regardless of when they
//! were written.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &str = "FAIRLENS-CHECKPOINT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic line)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint payload is truncated")]
    Truncated,
    #[error("checkpoint is a {found} model, expected {expected}")]
    WrongKind { expected: String, found: String },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: TensorValues,
}

impl Tensor {
    pub fn f32(name: &str, shape: &[usize], values: &[f32]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { name: name.into(), shape: shape.to_vec(), values: TensorValues::F32(values.to_vec()) }
    }

    pub fn f64(name: &str, shape: &[usize], values: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { name: name.into(), shape: shape.to_vec(), values: TensorValues::F64(values.to_vec()) }
    }

    fn info(&self) -> TensorInfo {
        let dtype = match self.values {
            TensorValues::F32(_) => DType::F32,
            TensorValues::F64(_) => DType::F64,
        };
        TensorInfo { name: self.name.clone(), shape: self.shape.clone(), dtype }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match &self.values {
            TensorValues::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorValues::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub architecture: String,
    pub version: String,
    pub created_at: String,
    /// Model-specific fields (latent width, loss weight, tolerance, ...).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

fn payload(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        t.write_le(&mut out);
    }
    out
}

/// Content version of a set of weights.
pub fn weights_version(architecture: &str, tensors: &[Tensor]) -> String {
    let mut h = Sha256::new();
    h.update(architecture.as_bytes());
    for t in tensors {
        h.update(t.name.as_bytes());
        h.update([0]);
    }
    h.update(payload(tensors));
    hex::encode(&h.finalize()[..8])
}

impl Checkpoint {
    pub fn new(kind: &str, architecture: &str, metadata: serde_json::Value, tensors: Vec<Tensor>) -> Self {
        let header = CheckpointHeader {
            kind: kind.into(),
            architecture: architecture.into(),
            version: weights_version(architecture, &tensors),
            created_at: chrono::Utc::now().to_rfc3339(),
            metadata,
            tensors: tensors.iter().map(Tensor::info).collect(),
        };
        Self { header, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&self.header)?.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload(&self.tensors));
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let n: usize = info.shape.iter().product();
            let values = match info.dtype {
                DType::F32 => {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
                    TensorValues::F32(
                        buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                }
                DType::F64 => {
                    let mut buf = vec![0u8; n * 8];
                    r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
                    TensorValues::F64(
                        buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                }
            };
            tensors.push(Tensor { name: info.name.clone(), shape: info.shape.clone(), values });
        }
        Ok(Self { header, tensors })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_reader(fs::File::open(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.header.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind.into(),
                found: self.header.kind.clone(),
            });
        }
        Ok(())
    }

    fn find(&self, name: &str, shape: &[usize]) -> Result<&Tensor, CheckpointError> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        if t.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.into(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn take_f32(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>, CheckpointError> {
        match &self.find(name, shape)?.values {
            TensorValues::F32(v) => Ok(v.clone()),
            TensorValues::F64(v) => Ok(v.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn take_f64(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>, CheckpointError> {
        match &self.find(name, shape)?.values {
            TensorValues::F64(v) => Ok(v.clone()),
            TensorValues::F32(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_version() {
        let ck = Checkpoint::new(
            "demo",
            "fc(2->3)",
            serde_json::json!({"alpha": 0.3}),
            vec![
                Tensor::f32("w", &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, -6.5]),
                Tensor::f64("b", &[3], &[0.1, 0.2, 0.3]),
            ],
        );
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_reader(&bytes[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.take_f64("b", &[3]).unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(matches!(back.take_f32("w", &[2, 3]), Err(CheckpointError::ShapeMismatch { .. })));
        assert!(back.expect_kind("other").is_err());

        let later = Checkpoint::new("demo", "fc(2->3)", serde_json::json!({}), ck.tensors.clone());
        assert_eq!(later.header.version, ck.header.version);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let ck = Checkpoint::new("demo", "a", serde_json::json!({}), vec![Tensor::f32("w", &[4], &[1.0; 4])]);
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_reader(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
        assert!(matches!(Checkpoint::from_reader(&b"nope\n"[..]), Err(CheckpointError::BadMagic)));
    }
}
