//! Named parameter storage and the on-disk checkpoint layout.
//!
//! A checkpoint is a directory holding `manifest.txt` (one `name shape offset`
//! line per tensor) and `params.bin`, the little-endian `f64` values of every
//! tensor concatenated in manifest order.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
const MANIFEST_HEADER: &str = "# hoi-checkpoint v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("parameter `{0}` missing from checkpoint")]
    Missing(String),
    #[error("parameter `{name}`: checkpoint shape {found:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("blob holds {found} bytes, manifest needs {expected}")]
    BlobSize { expected: usize, found: usize },
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let io_err = |p: &Path| {
            let path = p.display().to_string();
            move |source| CheckpointError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        let mut blob = Vec::with_capacity(self.num_values() * 8);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            manifest.push_str(&format!("{name} {} {}\n", shape.join("x"), blob.len()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
        let bpath = dir.join(BLOB_FILE);
        let mut f = fs::File::create(&bpath).map_err(io_err(&bpath))?;
        f.write_all(&blob).map_err(io_err(&bpath))?;
        Ok(())
    }

    /// Reads a checkpoint into a fresh store, preserving manifest order.
    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = fs::read_to_string(&mpath).map_err(|source| CheckpointError::Io {
            path: mpath.display().to_string(),
            source,
        })?;
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|source| CheckpointError::Io {
            path: bpath.display().to_string(),
            source,
        })?;

        let mut store = ParamStore::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            let line_no = lineno + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| CheckpointError::Manifest {
                line: line_no,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, offset] = fields.as_slice() else {
                return Err(bad("expected `name shape offset`"));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad("malformed shape"))?;
            let offset: usize = offset.parse().map_err(|_| bad("malformed offset"))?;
            if offset != expected_offset {
                return Err(bad("offsets are not contiguous"));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > blob.len() {
                return Err(CheckpointError::BlobSize {
                    expected: end,
                    found: blob.len(),
                });
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if store.id(name).is_some() {
                return Err(bad("duplicate name"));
            }
            store.add(*name, Tensor::new(shape, data).expect("numel checked"));
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(CheckpointError::BlobSize {
                expected: expected_offset,
                found: blob.len(),
            });
        }
        Ok(store)
    }

    /// Overwrites every parameter of `self` with the same-named tensor of `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), CheckpointError> {
        for i in 0..self.tensors.len() {
            let name = &self.names[i];
            let src_id = other
                .id(name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let src = other.get(src_id);
            if src.shape() != self.tensors[i].shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: self.tensors[i].shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}
