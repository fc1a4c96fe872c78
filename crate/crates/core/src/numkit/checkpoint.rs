//! Checkpoint directory: a `manifest.json` plus one raw little-endian `f64`
//! blob per tensor, row-major, named in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::mlp::{Dense, MlpModel, MlpSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub stage: String,
    pub seed: u64,
    #[serde(default)]
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub stage: String,
    pub seed: u64,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.f64le")
}

impl Checkpoint {
    pub fn new(kind: &str, stage: &str, seed: u64, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            stage: stage.into(),
            seed,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::checkpoint(name, "tensor missing from checkpoint"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = file_name(name);
            fs::write(dir.join(&file), t.to_le_bytes())?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            stage: self.stage.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
            tensors: entries,
        };
        // manifest last: its presence marks a complete checkpoint
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(MANIFEST).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(|err| Error::checkpoint(&p, err.to_string()))?;
            let t = Tensor::from_le_bytes(e.shape, &bytes).map_err(|err| Error::checkpoint(&p, err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            kind: manifest.kind,
            stage: manifest.stage,
            seed: manifest.seed,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str, dir: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::checkpoint(dir, format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::checkpoint(key, "manifest field missing"))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Store an MLP's layers into a checkpoint under `prefix`.
pub fn push_mlp(ck: &mut Checkpoint, prefix: &str, model: &MlpModel) {
    for (l, d) in model.layers.iter().enumerate() {
        ck.push(format!("{prefix}w{l}"), d.w.clone());
        ck.push(format!("{prefix}b{l}"), d.b.clone());
    }
}

pub fn read_mlp(ck: &Checkpoint, prefix: &str, spec: MlpSpec) -> Result<MlpModel> {
    let mut model = MlpModel::zeros(spec)?;
    for (l, d) in model.layers.iter_mut().enumerate() {
        let w = ck.get(&format!("{prefix}w{l}"))?;
        let b = ck.get(&format!("{prefix}b{l}"))?;
        w.ensure_shape(d.w.shape())?;
        b.ensure_shape(d.b.shape())?;
        *d = Dense { w: w.clone(), b: b.clone() };
    }
    Ok(model)
}

pub fn save_model(dir: &Path, model: &MlpModel, stage: &str, seed: u64) -> Result<()> {
    let meta = serde_json::json!({
        "spec": model.spec,
        "checksum": model.checksum(),
    });
    let mut ck = Checkpoint::new("mlp", stage, seed, meta);
    push_mlp(&mut ck, "", model);
    ck.save(dir)
}

pub fn load_model(dir: &Path) -> Result<MlpModel> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_kind("mlp", dir)?;
    let spec: MlpSpec = ck.meta_field("spec")?;
    read_mlp(&ck, "", spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Activation, Head, RngStream};

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MlpSpec::new(vec![3, 7, 2], Activation::Tanh, Head::SoftmaxClassifier).unwrap();
        let m = MlpModel::init(spec, &mut RngStream::new(1, 1)).unwrap();
        save_model(dir.path(), &m, "train-base", 42).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.checksum(), back.checksum());
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest.tensors.len(), 4);
        assert_eq!(manifest.seed, 42);
        let raw = std::fs::read(dir.path().join(&manifest.tensors[0].file)).unwrap();
        assert_eq!(raw.len(), 7 * 3 * 8);
        assert_eq!(f64::from_le_bytes(raw[..8].try_into().unwrap()), m.layers[0].w.data()[0]);
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(!Checkpoint::exists(dir.path()));
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
