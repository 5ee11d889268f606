//! Tensor-bundle files (`.qrb`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QRB1" | u64 manifest length | UTF-8 JSON manifest | payload
//! ```
//!
//! The manifest is `{"entries":[{name,dtype,shape,offset,byte_len}],"meta":{..}}`
//! with offsets relative to the start of the payload. Arrays are row-major,
//! `f32` or `i64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"QRB1";
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"QRB1\"")]
    BadMagic,
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("manifest is not valid: {0}")]
    Manifest(String),
    #[error("entry {name:?}: byte_len {byte_len} does not match shape {shape:?} of dtype {dtype}")]
    ShapeMismatch {
        name: String,
        dtype: String,
        shape: Vec<usize>,
        byte_len: u64,
    },
    #[error("entry {name:?} contains a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("invalid entry name {0:?}")]
    InvalidName(String),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("entry {name:?} has dtype {actual}, expected {expected}")]
    WrongDtype {
        name: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One array stored in a bundle.
#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32(Tensor<f32>),
    I64(Tensor<i64>),
}

impl Array {
    pub fn dtype(&self) -> &'static str {
        match self {
            Array::F32(_) => "f32",
            Array::I64(_) => "i64",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32(t) => t.shape(),
            Array::I64(t) => t.shape(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Array::F32(t) => 4 * t.len(),
            Array::I64(t) => 8 * t.len(),
        }
    }
}

impl From<Tensor<f32>> for Array {
    fn from(t: Tensor<f32>) -> Self {
        Array::F32(t)
    }
}

impl From<Tensor<i64>> for Array {
    fn from(t: Tensor<i64>) -> Self {
        Array::I64(t)
    }
}

/// Named arrays plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub entries: BTreeMap<String, Array>,
    pub meta: BTreeMap<String, String>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: impl Into<Array>) {
        self.entries.insert(name.into(), array.into());
    }

    pub fn with(mut self, name: impl Into<String>, array: impl Into<Array>) -> Self {
        self.insert(name, array);
        self
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>, BundleError> {
        match self.entries.get(name) {
            Some(Array::F32(t)) => Ok(t),
            Some(other) => Err(BundleError::WrongDtype {
                name: name.to_string(),
                expected: "f32",
                actual: other.dtype(),
            }),
            None => Err(BundleError::MissingEntry(name.to_string())),
        }
    }

    pub fn i64(&self, name: &str) -> Result<&Tensor<i64>, BundleError> {
        match self.entries.get(name) {
            Some(Array::I64(t)) => Ok(t),
            Some(other) => Err(BundleError::WrongDtype {
                name: name.to_string(),
                expected: "i64",
                actual: other.dtype(),
            }),
            None => Err(BundleError::MissingEntry(name.to_string())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<EntryRecord>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    pub allow_nonfinite: bool,
}

/// Serializes a bundle to bytes.
pub fn encode_bundle(bundle: &TensorBundle, opts: WriteOptions) -> Result<Vec<u8>, BundleError> {
    let mut records = Vec::with_capacity(bundle.entries.len());
    let mut offset = 0u64;
    for (name, array) in &bundle.entries {
        if name.is_empty() {
            return Err(BundleError::InvalidName(name.clone()));
        }
        if !opts.allow_nonfinite {
            if let Array::F32(t) = array {
                if let Some(index) = t.first_non_finite() {
                    return Err(BundleError::NonFinite {
                        name: name.clone(),
                        index,
                    });
                }
            }
        }
        let byte_len = array.byte_len() as u64;
        records.push(EntryRecord {
            name: name.clone(),
            dtype: array.dtype().to_string(),
            shape: array.shape().to_vec(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let manifest = Manifest {
        entries: records,
        meta: bundle.meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| BundleError::Manifest(e.to_string()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for array in bundle.entries.values() {
        match array {
            Array::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Array::I64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

/// Parses bundle bytes; exact inverse of [`encode_bundle`].
pub fn decode_bundle(bytes: &[u8]) -> Result<TensorBundle, BundleError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(BundleError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(BundleError::Truncated("header".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let payload_start = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| BundleError::Truncated("manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| BundleError::Manifest(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut bundle = TensorBundle {
        entries: BTreeMap::new(),
        meta: manifest.meta,
    };
    for rec in manifest.entries {
        if rec.name.is_empty() || bundle.entries.contains_key(&rec.name) {
            return Err(BundleError::InvalidName(rec.name));
        }
        let count: usize = rec.shape.iter().product();
        let width = match rec.dtype.as_str() {
            "f32" => 4,
            "i64" => 8,
            other => return Err(BundleError::Manifest(format!("unknown dtype {other:?}"))),
        };
        if rec.byte_len != (width * count) as u64 {
            return Err(BundleError::ShapeMismatch {
                name: rec.name,
                dtype: rec.dtype,
                shape: rec.shape,
                byte_len: rec.byte_len,
            });
        }
        let start = rec.offset as usize;
        let end = start
            .checked_add(rec.byte_len as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| BundleError::Truncated(format!("payload of {:?}", rec.name)))?;
        let raw = &payload[start..end];
        let array = if width == 4 {
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Array::F32(Tensor::new(rec.shape, data)?)
        } else {
            let data = raw
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Array::I64(Tensor::new(rec.shape, data)?)
        };
        bundle.entries.insert(rec.name, array);
    }
    Ok(bundle)
}

pub fn write_bundle(bundle: &TensorBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    write_bundle_with(bundle, path, WriteOptions::default())
}

pub fn write_bundle_with(
    bundle: &TensorBundle,
    path: impl AsRef<Path>,
    opts: WriteOptions,
) -> Result<(), BundleError> {
    let bytes = encode_bundle(bundle, opts)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<TensorBundle, BundleError> {
    let bytes = fs::read(path)?;
    decode_bundle(&bytes)
}
