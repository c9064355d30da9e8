//! Single-file parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "PXGCKPT\0"
//! version  u32
//! mlen     u64       byte length of the manifest
//! manifest mlen bytes of JSON: { version, meta, tensors: [{name, shape, dtype, offset, len}] }
//! blob     raw values; each tensor at `offset` bytes from the start of the blob
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PXGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Missing(format!("checkpoint tensor {name}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.len() * 8) as u64;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                len,
            });
            offset += len;
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = 20usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..blob_start])?;
        let blob = &bytes[blob_start..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::Format(format!(
                    "{}: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            let (start, len) = (e.offset as usize, e.len as usize);
            if len != n * 8 || start.checked_add(len).is_none_or(|end| end > blob.len()) {
                return Err(Error::Format(format!("{}: blob range invalid", e.name)));
            }
            let data = blob[start..start + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
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

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut ok = Checkpoint::new(serde_json::json!({}));
        ok.insert("a", Tensor::zeros([2]));
        let mut bytes = ok.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new(serde_json::json!({"k": 1}));
        c.insert("x", Tensor::new([1], vec![1.5]).unwrap());
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), VERSION);
        assert_eq!(&b[b.len() - 8..], &1.5f64.to_le_bytes());
    }

    proptest! {
        #[test]
        fn round_trips(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 0usize..40) {
            let split = split.min(vals.len());
            let mut c = Checkpoint::new(serde_json::json!({"n": vals.len()}));
            c.insert("p/a", Tensor::new([split], vals[..split].to_vec()).unwrap());
            c.insert("p/b", Tensor::new([vals.len() - split, 1], vals[split..].to_vec()).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
