//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `XDCKPT01`, a little-endian u64 header length,
//! a JSON header, then the raw little-endian f64 values of every tensor in
//! header order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchConfig, Networks, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"XDCKPT01";
const FORMAT: &str = "xdomain-checkpoint-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("architecture fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    fingerprint: String,
    arch: ArchConfig,
    step: u64,
    seed: u64,
    tensors: Vec<TensorEntry>,
    extra: serde_json::Value,
}

/// Everything stored in one checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub step: u64,
    pub seed: u64,
    /// Network parameters followed by any trainer state tensors.
    pub tensors: Vec<(String, Tensor)>,
    /// Free-form trainer metadata.
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_networks(nets: &Networks, step: u64, seed: u64) -> Self {
        Self {
            arch: nets.arch.clone(),
            step,
            seed,
            tensors: nets
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the networks, checking the stored architecture against `expected`.
    pub fn networks(&self, expected: &ArchConfig) -> Result<Networks, CheckpointError> {
        if self.arch.fingerprint() != expected.fingerprint() {
            return Err(CheckpointError::Fingerprint {
                expected: expected.fingerprint(),
                found: self.arch.fingerprint(),
            });
        }
        self.networks_unchecked()
    }

    /// Rebuilds the networks using the architecture stored in the file.
    pub fn networks_unchecked(&self) -> Result<Networks, CheckpointError> {
        let mut nets = Networks::with_init(self.arch.clone(), 0, super::InitScheme::Zeros)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let names: Vec<String> = nets.params.names().map(str::to_string).collect();
        for name in names {
            let t = self
                .tensor(&name)
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
            let slot = nets.params.get_mut(&name).expect("name from store");
            if slot.shape() != t.shape() {
                return Err(CheckpointError::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(nets)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT.to_string(),
            fingerprint: self.arch.fingerprint(),
            arch: self.arch.clone(),
            step: self.step,
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let values: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if header.format != FORMAT {
            return Err(CheckpointError::Format(format!("unknown format {}", header.format)));
        }
        if header.fingerprint != header.arch.fingerprint() {
            return Err(bad("header fingerprint does not match its architecture"));
        }
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(CheckpointError::Format(format!("truncated data for {}", e.name)));
            }
            let vals = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let t = Tensor::new(e.shape, vals).map_err(|err| CheckpointError::Format(err.to_string()))?;
            tensors.push((e.name, t));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            arch: header.arch,
            step: header.step,
            seed: header.seed,
            tensors,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl ParamStore {
    /// Bitwise equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }
}
