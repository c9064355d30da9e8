//! Content-addressed storage for images, checkpoints, datasets and results.
//!
//! ```text
//! root/registry.json         active model and classifier bank, known datasets
//! root/blobs/<sha256>.png    images
//! root/checkpoints/<sha256>  model and classifier checkpoints
//! root/datasets/<key>/       generated datasets
//! root/results/<key>.json    job results, keyed by request hash
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use pixguide::checkpoint::Checkpoint;
use pixguide::classifier::ClassifierBank;
use pixguide::dataset::sha256_hex;
use pixguide::unet::DiffusionModel;
use pixguide::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub model: Option<String>,
    pub bank: Option<String>,
    pub datasets: BTreeMap<String, String>,
}

#[derive(Default)]
struct State {
    registry: Registry,
    model: Option<Arc<DiffusionModel>>,
    bank: Option<Arc<ClassifierBank>>,
}

/// A loaded model and bank with the hashes of their checkpoints.
#[derive(Clone)]
pub struct Artifacts {
    pub model: Arc<DiffusionModel>,
    pub model_hash: String,
    pub bank: Option<(Arc<ClassifierBank>, String)>,
}

pub struct Workspace {
    root: PathBuf,
    state: RwLock<State>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.len() <= 128
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Writes through a temporary file so readers never see partial content.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hash of a request: kind, canonical JSON body and the artifacts it depends on.
pub fn request_key(kind: &str, body: &serde_json::Value, deps: &[&str]) -> String {
    let mut s = format!("{kind}\n{body}");
    for d in deps {
        s.push('\n');
        s.push_str(d);
    }
    sha256_hex(s.as_bytes())
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in ["blobs", "checkpoints", "datasets", "results"] {
            fs::create_dir_all(root.join(d))?;
        }
        let ws = Workspace {
            root,
            state: RwLock::new(State::default()),
        };
        let reg_path = ws.root.join("registry.json");
        if reg_path.exists() {
            let registry: Registry = serde_json::from_slice(&fs::read(&reg_path)?)?;
            let mut st = State::default();
            if let Some(h) = &registry.model {
                st.model = Some(Arc::new(DiffusionModel::load(ws.checkpoint_path(h))?));
            }
            if let Some(h) = &registry.bank {
                st.bank = Some(Arc::new(ClassifierBank::load(ws.checkpoint_path(h))?));
            }
            st.registry = registry;
            *ws.state.write().expect("workspace lock") = st;
        }
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn registry(&self) -> Registry {
        self.state.read().expect("workspace lock").registry.clone()
    }

    fn save_registry(&self, reg: &Registry) -> Result<()> {
        write_atomic(
            &self.root.join("registry.json"),
            &serde_json::to_vec_pretty(reg)?,
        )
    }

    fn checkpoint_path(&self, hash: &str) -> PathBuf {
        self.root.join("checkpoints").join(hash)
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let h = sha256_hex(bytes);
        let p = self.root.join("blobs").join(format!("{h}.png"));
        if !p.exists() {
            write_atomic(&p, bytes)?;
        }
        Ok(h)
    }

    pub fn blob(&self, hash: &str) -> Option<Vec<u8>> {
        if !valid_key(hash) {
            return None;
        }
        fs::read(self.root.join("blobs").join(format!("{hash}.png"))).ok()
    }

    /// Stores a result once; later writes under the same key are ignored.
    pub fn put_result(&self, key: &str, value: &serde_json::Value) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::InvalidArgument(format!("bad result key {key}")));
        }
        let p = self.root.join("results").join(format!("{key}.json"));
        if !p.exists() {
            write_atomic(&p, &serde_json::to_vec_pretty(value)?)?;
        }
        Ok(())
    }

    pub fn result(&self, key: &str) -> Option<serde_json::Value> {
        if !valid_key(key) {
            return None;
        }
        let bytes = fs::read(self.root.join("results").join(format!("{key}.json"))).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn put_checkpoint(&self, ck: &Checkpoint) -> Result<String> {
        let bytes = ck.to_bytes()?;
        let h = sha256_hex(&bytes);
        let p = self.checkpoint_path(&h);
        if !p.exists() {
            write_atomic(&p, &bytes)?;
        }
        Ok(h)
    }

    /// Stores `model` and makes it active. The active bank is kept only when
    /// it was trained on features of this same checkpoint.
    pub fn install_model(&self, model: DiffusionModel) -> Result<String> {
        let h = self.put_checkpoint(&model.to_checkpoint()?)?;
        let mut st = self.state.write().expect("workspace lock");
        if st.registry.model.as_deref() != Some(&h) {
            st.registry.bank = None;
            st.bank = None;
        }
        st.registry.model = Some(h.clone());
        st.model = Some(Arc::new(model));
        self.save_registry(&st.registry)?;
        Ok(h)
    }

    pub fn install_bank(&self, bank: ClassifierBank) -> Result<String> {
        let h = self.put_checkpoint(&bank.to_checkpoint()?)?;
        let mut st = self.state.write().expect("workspace lock");
        st.registry.bank = Some(h.clone());
        st.bank = Some(Arc::new(bank));
        self.save_registry(&st.registry)?;
        Ok(h)
    }

    pub fn artifacts(&self) -> Option<Artifacts> {
        let st = self.state.read().expect("workspace lock");
        let model = st.model.clone()?;
        let model_hash = st.registry.model.clone()?;
        let bank = st.bank.clone().zip(st.registry.bank.clone());
        Some(Artifacts {
            model,
            model_hash,
            bank,
        })
    }

    pub fn dataset_dir(&self, key: &str) -> Option<PathBuf> {
        let st = self.state.read().expect("workspace lock");
        st.registry.datasets.get(key).map(|rel| self.root.join(rel))
    }

    /// Directory for a new dataset; registered once it is complete.
    pub fn dataset_slot(&self, key: &str) -> PathBuf {
        self.root.join("datasets").join(key)
    }

    pub fn register_dataset(&self, key: &str) -> Result<()> {
        let mut st = self.state.write().expect("workspace lock");
        st.registry
            .datasets
            .insert(key.into(), format!("datasets/{key}"));
        self.save_registry(&st.registry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_and_results_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let h = ws.put_blob(b"abc").unwrap();
        assert_eq!(h, sha256_hex(b"abc"));
        assert_eq!(ws.put_blob(b"abc").unwrap(), h);
        assert_eq!(ws.blob(&h).unwrap(), b"abc");
        assert!(ws.blob("../registry").is_none());
        let v = serde_json::json!({"a": 1});
        ws.put_result("k1", &v).unwrap();
        ws.put_result("k1", &serde_json::json!({"a": 2})).unwrap();
        assert_eq!(ws.result("k1").unwrap(), v);
        assert!(ws.result("missing").is_none());
        assert!(ws.artifacts().is_none());
    }

    #[test]
    fn request_keys_depend_on_everything() {
        let b = serde_json::json!({"x": 1, "y": [1, 2]});
        let k = request_key("edit", &b, &["m"]);
        assert_eq!(
            k,
            request_key("edit", &serde_json::json!({"y": [1, 2], "x": 1}), &["m"])
        );
        assert_ne!(k, request_key("edit", &b, &["n"]));
        assert_ne!(k, request_key("estimate", &b, &["m"]));
    }
}
