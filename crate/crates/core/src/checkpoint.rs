//! Checkpoint directories: `manifest.toml` (names, shapes, step, loss trace),
//! `config.toml` (configuration snapshot) and one little-endian `f64` blob per
//! parameter under `params/`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "citab-checkpoint-1";
pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: u64,
    loss_trace: Vec<f64>,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub config: String,
    pub step: u64,
    pub loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: String, step: u64, loss_trace: Vec<f64>) -> Self {
        Self {
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            config,
            step,
            loss_trace,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("params");
        std::fs::create_dir_all(&pdir).at(&pdir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            let file = format!("params/{i:04}.f64");
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            std::fs::write(&path, bytes).at(&path)?;
            entries.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), file });
        }
        let manifest = Manifest { format: FORMAT.into(), step: self.step, loss_trace: self.loss_trace.clone(), params: entries };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join(MANIFEST);
        std::fs::write(&path, text).at(&path)?;
        let path = dir.join(CONFIG);
        std::fs::write(&path, &self.config).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest: Manifest = toml::from_str(&std::fs::read_to_string(&path).at(&path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Format { path, line: 1, msg: format!("unknown checkpoint format `{}`", manifest.format) });
        }
        let mut params = Vec::with_capacity(manifest.params.len());
        for e in manifest.params {
            let p = dir.join(&e.file);
            let bytes = std::fs::read(&p).at(&p)?;
            let numel: usize = e.shape.iter().product();
            if bytes.len() != 8 * numel {
                return Err(Error::Format {
                    path: p,
                    line: 0,
                    msg: format!("{} bytes for shape {:?}", bytes.len(), e.shape),
                });
            }
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            params.push((e.name, Tensor::new(e.shape, data)?));
        }
        let cpath = dir.join(CONFIG);
        let config = std::fs::read_to_string(&cpath).at(&cpath)?;
        Ok(Self { params, config, step: manifest.step, loss_trace: manifest.loss_trace })
    }

    /// Copies every stored tensor into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store.id(name).ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))?;
            store.set(id, t.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::randn(&[3, 2], 1.0, &mut rng));
        store.add("a.bias", Tensor::randn(&[2], 1e-300, &mut rng));
        let ck = Checkpoint::from_store(&store, "x = 1\n".into(), 7, vec![0.1, 1.0 / 3.0]);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[3, 2]));
        other.add("a.bias", Tensor::zeros(&[2]));
        back.apply(&mut other).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn mismatched_model_is_config_error() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]));
        let ck = Checkpoint::from_store(&store, String::new(), 0, vec![]);
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3]));
        assert!(matches!(ck.apply(&mut other), Err(Error::Config(_))));
    }
}
