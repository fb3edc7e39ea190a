//! Binary checkpoint format.
//!
//! Layout: `b"MMOE"`, format version (`u32` LE), metadata length (`u64` LE),
//! UTF-8 JSON metadata, then the raw tensor payloads back to back. Metadata
//! holds the model config and an ordered tensor directory; each entry gives
//! name, shape, payload byte offset, byte length and dtype. Payloads are
//! row-major little-endian IEEE-754.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{DType, Scalar, Tensor};
use crate::model::{Checkpoint, ModelConfig};

pub const MAGIC: &[u8; 4] = b"MMOE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    dtype: DType,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors().len());
        let mut offset = 0u64;
        for (name, t) in self.tensors() {
            let nbytes = (t.len() * T::DTYPE.size_of()) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
                dtype: T::DTYPE,
            });
            offset += nbytes;
        }
        let meta = serde_json::to_vec(&Metadata {
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in self.tensors().values() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Decodes a checkpoint whose payloads are stored as `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match AnyCheckpoint::from_bytes(bytes)? {
            AnyCheckpoint::F32(c) if T::DTYPE == DType::F32 => Ok(c.cast()),
            AnyCheckpoint::F64(c) if T::DTYPE == DType::F64 => Ok(c.cast()),
            other => Err(Error::Format(format!(
                "checkpoint stores {} tensors, {} requested",
                other.dtype().name(),
                T::DTYPE.name()
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A checkpoint of either precision, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn dtype(&self) -> DType {
        match self {
            AnyCheckpoint::F32(_) => DType::F32,
            AnyCheckpoint::F64(_) => DType::F64,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    /// Converts to the requested precision (exact when widening).
    pub fn into_precision<T: Scalar>(self) -> Checkpoint<T> {
        match self {
            AnyCheckpoint::F32(c) => c.cast(),
            AnyCheckpoint::F64(c) => c.cast(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing MMOE magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("metadata length exceeds file".into()))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])?;
        let payload = &bytes[meta_end..];
        let dtype = meta
            .tensors
            .first()
            .map(|e| e.dtype)
            .ok_or_else(|| Error::Format("empty tensor directory".into()))?;
        if meta.tensors.iter().any(|e| e.dtype != dtype) {
            return Err(Error::Format("mixed tensor dtypes".into()));
        }
        let total: u64 = meta.tensors.iter().map(|e| e.nbytes).sum();
        if total as usize != payload.len() {
            return Err(Error::Format(format!(
                "payload holds {} bytes, directory describes {total}",
                payload.len()
            )));
        }
        match dtype {
            DType::F32 => Ok(AnyCheckpoint::F32(decode(meta, payload)?)),
            DType::F64 => Ok(AnyCheckpoint::F64(decode(meta, payload)?)),
        }
    }
}

fn decode<T: Scalar>(meta: Metadata, payload: &[u8]) -> Result<Checkpoint<T>> {
    let size = T::DTYPE.size_of();
    let mut tensors = IndexMap::with_capacity(meta.tensors.len());
    for e in meta.tensors {
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.nbytes as usize);
        if len != numel * size || start.checked_add(len).is_none_or(|end| end > payload.len()) {
            return Err(Error::Format(format!("bad directory entry for {}", e.name)));
        }
        let data = payload[start..start + len]
            .chunks_exact(size)
            .map(T::read_le)
            .collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", e.name)));
        }
    }
    Checkpoint::new(meta.config, tensors)
}
