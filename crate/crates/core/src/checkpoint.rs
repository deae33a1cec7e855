//! Single-file archive: magic, manifest length, JSON manifest, f32le blobs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lsmfm_tensor::{ParamStore, Tensor};

use crate::error::{invalid, io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"LSMFMCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the blob relative to the end of the manifest.
    pub offset: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub epoch: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
    #[serde(default)]
    pub history: Vec<serde_json::Value>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Hex SHA-256 of a serializable value's canonical JSON.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let v = serde_json::to_value(cfg).expect("serializable config");
    let bytes = serde_json::to_vec(&v).expect("json");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: String, epoch: usize) -> Self {
        Self {
            manifest: Manifest {
                kind: kind.into(),
                config_hash,
                epoch,
                ..Manifest::default()
            },
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter of `store` as `<section>/<name>`.
    pub fn add_store(&mut self, section: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.tensors.insert(format!("{section}/{name}"), t.clone());
        }
    }

    pub fn add_tensors(&mut self, section: &str, items: impl IntoIterator<Item = (String, Tensor)>) {
        for (name, t) in items {
            self.tensors.insert(format!("{section}/{name}"), t);
        }
    }

    pub fn section(&self, section: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{section}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    /// Copies `section` into `store`; every store parameter whose name starts
    /// with `prefix` must be present with the same shape.
    pub fn load_into(&self, section: &str, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let sec = self.section(section);
        let mut n = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if !name.starts_with(prefix) {
                continue;
            }
            let t = sec
                .get(&name)
                .ok_or_else(|| invalid(format!("checkpoint section `{section}` lacks `{name}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(invalid(format!(
                    "checkpoint `{section}/{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
            n += 1;
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = self.manifest.clone();
        manifest.tensors.clear();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            manifest.tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt(0, "not a checkpoint archive".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt(8, format!("manifest length {len} exceeds file")))?;
        let mut manifest: Manifest =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| fmt(16 + e.column(), e.to_string()))?;
        let blobs = &bytes[body..];
        let mut tensors = BTreeMap::new();
        let mut expected = 0u64;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(fmt(body + e.offset as usize, format!("tensor {} out of order", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > blobs.len() {
                return Err(fmt(body + blobs.len(), format!("truncated tensor {}", e.name)));
            }
            let data = blobs[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data));
            expected = end as u64;
        }
        if expected as usize != blobs.len() {
            return Err(fmt(body + expected as usize, "trailing bytes after last tensor".into()));
        }
        manifest.tensors.clear();
        Ok(Self { manifest, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        drop(f);
        fs::rename(&tmp, path).map_err(io_err(path))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.manifest == other.manifest
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}
