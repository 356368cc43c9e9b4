//! Single-file weight archive: magic, format version, JSON header, then
//! little-endian f32 blobs addressed by the header's tensor index.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use disth_tensor::{ParamSet, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DISTHCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Archive {
            kind: kind.into(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), (shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert_params<F: Scalar>(&mut self, prefix: &str, params: &ParamSet<F>) {
        for p in params.iter() {
            let data = p.to_vec().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
            self.insert(format!("{prefix}{}", p.name()), p.shape(), data);
        }
    }

    /// Copy stored values into `params`; every parameter must be present with a matching shape.
    pub fn load_params<F: Scalar>(&self, prefix: &str, params: &ParamSet<F>) -> Result<()> {
        for p in params.iter() {
            let key = format!("{prefix}{}", p.name());
            let (shape, data) = self
                .get(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {key}")))?;
            if shape != p.shape() {
                return Err(Error::Config(format!(
                    "tensor {key} has shape {shape:?}, model expects {:?}",
                    p.shape()
                )));
            }
            p.set(data.iter().map(|&v| F::cst(v as f64)).collect());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, (shape, data)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
            });
            offset += data.len();
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Written to a sibling temp file and renamed, so a crash never leaves a torn archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes).map_err(|m| ckpt_err(path, m))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Archive, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint archive".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| e.to_string())?;
        let blob = &bytes[body..];
        let mut tensors = BTreeMap::new();
        for t in header.tensors {
            if t.shape.iter().product::<usize>() != t.len {
                return Err(format!("tensor {} length disagrees with its shape", t.name));
            }
            let range = 4 * t.offset..4 * (t.offset + t.len);
            let raw = blob.get(range).ok_or_else(|| format!("tensor {} is truncated", t.name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(t.name, (t.shape, data));
        }
        Ok(Archive {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(ckpt_err(path, format!("expected a {kind} archive, found {}", self.kind)));
        }
        Ok(())
    }
}

/// SHA-256 over parameter names, shapes and values, in registration order.
pub fn params_hash<F: Scalar>(params: &ParamSet<F>) -> String {
    let mut h = Sha256::new();
    for p in params.iter() {
        h.update(p.name().as_bytes());
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.to_vec() {
            h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = Archive::new("test", serde_json::json!({"x": 1}));
        a.insert("w", &[2, 2], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE]);
        a.insert("b", &[1], vec![7.0]);
        a.save(&path).unwrap();
        assert_eq!(Archive::load(&path).unwrap(), a);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello world, this is not a checkpoint").unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Checkpoint { .. })));
        assert!(matches!(Archive::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
