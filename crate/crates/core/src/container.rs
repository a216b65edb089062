//! Tensor container files.
//!
//! A container is a directory holding `manifest.json` and `tensors.bin`.
//! The manifest lists every tensor's name, group, shape, dtype and byte
//! range in the blob; the blob is the concatenation of all tensors as
//! little-endian floats. Arbitrary JSON metadata rides along in the
//! manifest's `meta` field. Saving then loading is bit-exact.

use std::path::Path;

use fsaug_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Group, ParamStore};

pub const FORMAT: &str = "fsaug-tensors/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A tensor with its name and group label as stored in a container.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
}

pub fn save<T: Scalar>(dir: impl AsRef<Path>, tensors: &[NamedTensor<T>], meta: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let offset = blob.len() as u64;
        for &v in t.value.data() {
            v.write_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            group: t.group.clone(),
            shape: t.value.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest { format: FORMAT.to_string(), meta, tensors: entries };
    let blob_path = dir.join(BLOB_FILE);
    std::fs::write(&blob_path, &blob).map_err(Error::io(&blob_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(Error::io(&manifest_path))
}

pub fn load<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Vec<NamedTensor<T>>, serde_json::Value)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Format { offset: 0, message: format!("unsupported container format {:?}", manifest.format) });
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = std::fs::read(&blob_path).map_err(Error::io(&blob_path))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(Error::Consistency(format!("tensor {} is {} but {} was requested", e.name, e.dtype, T::DTYPE)));
        }
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
        if e.bytes as usize != n * T::BYTES || end > blob.len() {
            return Err(Error::Format { offset: e.offset, message: format!("tensor {} overruns the blob", e.name) });
        }
        let data = blob[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push(NamedTensor { name: e.name, group: e.group, value: Tensor::new(&e.shape, data) });
    }
    Ok((out, manifest.meta))
}

impl<T: Scalar> ParamStore<T> {
    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor<T>> {
        self.iter()
            .map(|p| NamedTensor {
                name: format!("{prefix}{}", p.name),
                group: p.group.as_str().to_string(),
                value: p.value.as_ref().clone(),
            })
            .collect()
    }

    /// Rebuilds a store from container entries whose names start with `prefix`.
    pub fn from_named(tensors: &[NamedTensor<T>], prefix: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for t in tensors {
            if let Some(name) = t.name.strip_prefix(prefix) {
                store.insert(name, Group::parse(&t.group)?, t.value.clone());
            }
        }
        Ok(store)
    }
}
