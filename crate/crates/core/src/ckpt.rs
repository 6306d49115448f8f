//! Shared on-disk checkpoint format.
//!
//! A checkpoint is a directory with a `manifest.json` and one raw blob of
//! little-endian tensor data. The manifest lists every tensor's name,
//! shape, dtype, and byte range, plus phase/provenance metadata. The
//! checkpoint hash is sha256 over the canonical manifest (hash field
//! excluded) and the blob bytes; round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CoreError;
use crate::scalar::{DType, Scalar};
use crate::tensor::PTensor;
use crate::Result;

pub const FORMAT: &str = "stitchkit-ckpt-v1";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub len_bytes: usize,
    pub blob: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// dense | stitched | moe | router | btm
    pub kind: String,
    /// seed | expert | stitch | baseline-merge | router | ...
    pub phase: String,
    pub parent: Option<String>,
    pub config: serde_json::Value,
    /// Kind-specific metadata (member tables, stitch tables, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// Content hash of everything above plus the blob.
    pub hash: String,
}

fn hash_hex(bytes: impl IntoIterator<Item = u8>) -> String {
    let mut hasher = Sha256::new();
    let buf: Vec<u8> = bytes.into_iter().collect();
    hasher.update(&buf);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn compute_hash(manifest: &Manifest, blob: &[u8]) -> String {
    let mut unhashed = manifest.clone();
    unhashed.hash = String::new();
    let head = serde_json::to_vec(&unhashed).expect("manifest serializes");
    let mut hasher = Sha256::new();
    hasher.update(&head);
    hasher.update(blob);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of a raw byte buffer; used for tensor-level freeze checks.
pub fn bytes_hash(bytes: &[u8]) -> String {
    hash_hex(bytes.iter().copied())
}

pub struct CkptWriter {
    pub kind: String,
    pub phase: String,
    pub parent: Option<String>,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    blob: Vec<u8>,
    tensors: Vec<TensorEntry>,
}

impl CkptWriter {
    pub fn new(kind: &str, phase: &str) -> Self {
        Self {
            kind: kind.to_string(),
            phase: phase.to_string(),
            parent: None,
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            blob: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add_tensor<E: Scalar>(&mut self, name: &str, t: &PTensor<E>) {
        let bytes = t.to_bytes();
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            dtype: E::DTYPE,
            offset: self.blob.len(),
            len_bytes: bytes.len(),
            blob: BLOB_FILE.to_string(),
        });
        self.blob.extend_from_slice(&bytes);
    }

    /// Write the checkpoint directory and return its content hash.
    pub fn write(self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest {
            format: FORMAT.to_string(),
            kind: self.kind,
            phase: self.phase,
            parent: self.parent,
            config: self.config,
            meta: self.meta,
            tensors: self.tensors,
            hash: String::new(),
        };
        manifest.hash = compute_hash(&manifest, &self.blob);
        fs::write(dir.join(BLOB_FILE), &self.blob)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(manifest.hash)
    }
}

pub struct Ckpt {
    pub dir: PathBuf,
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl Ckpt {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != FORMAT {
            return Err(CoreError::Checkpoint(format!(
                "unknown checkpoint format `{}` in {}",
                manifest.format,
                dir.display()
            )));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let expect = compute_hash(&manifest, &blob);
        if expect != manifest.hash {
            return Err(CoreError::Checkpoint(format!(
                "hash mismatch in {} (manifest {}, computed {})",
                dir.display(),
                manifest.hash,
                expect
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            blob,
        })
    }

    pub fn hash(&self) -> &str {
        &self.manifest.hash
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.manifest.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_bytes(&self, name: &str) -> Result<&[u8]> {
        let e = self
            .entry(name)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor `{name}`")))?;
        Ok(&self.blob[e.offset..e.offset + e.len_bytes])
    }

    pub fn load_tensor<E: Scalar>(&self, name: &str) -> Result<PTensor<E>> {
        let e = self
            .entry(name)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor `{name}`")))?;
        if e.dtype != E::DTYPE {
            return Err(CoreError::Checkpoint(format!(
                "tensor `{name}` has dtype {:?}, expected {:?}",
                e.dtype,
                E::DTYPE
            )));
        }
        Ok(PTensor::from_bytes(
            &e.shape,
            &self.blob[e.offset..e.offset + e.len_bytes],
        ))
    }

    /// All tensors, in manifest order.
    pub fn load_all<E: Scalar>(&self) -> Result<Vec<(String, PTensor<E>)>> {
        self.manifest
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), self.load_tensor::<E>(&e.name)?)))
            .collect()
    }
}

/// Resolves checkpoint hashes to directories by scanning a run root.
pub struct CkptStore {
    pub root: PathBuf,
    cache: BTreeMap<String, PathBuf>,
}

impl CkptStore {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            cache: BTreeMap::new(),
        }
    }

    fn scan(dir: &Path, found: &mut BTreeMap<String, PathBuf>) {
        let Ok(entries) = fs::read_dir(dir) else {
            return;
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                Self::scan(&path, found);
            } else if path.file_name().is_some_and(|n| n == "manifest.json") {
                if let Ok(bytes) = fs::read(&path) {
                    if let Ok(m) = serde_json::from_slice::<Manifest>(&bytes) {
                        found.insert(m.hash, dir.to_path_buf());
                    }
                }
            }
        }
    }

    pub fn resolve(&mut self, hash: &str) -> Result<Ckpt> {
        if !self.cache.contains_key(hash) {
            let mut found = BTreeMap::new();
            Self::scan(&self.root.clone(), &mut found);
            self.cache.extend(found);
        }
        let dir = self.cache.get(hash).ok_or_else(|| {
            CoreError::Checkpoint(format!(
                "checkpoint {hash} not found under {}",
                self.root.display()
            ))
        })?;
        Ckpt::open(dir)
    }
}
