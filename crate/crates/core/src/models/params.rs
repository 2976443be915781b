use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{tnsr, Graph, RngStream, Tensor, Var};
use crate::{Error, Result};

/// Named parameter tensors, keyed by a dotted path such as
/// `stage1.block0.conv2.w`. Iteration order is the lexicographic key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path `{path}`")));
        }
        self.tensors.insert(path, t);
        Ok(())
    }

    /// He-normal init: `N(0, 2/fan_in)`.
    pub(crate) fn insert_he(
        &mut self,
        path: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RngStream,
    ) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| std * rng.normal());
        self.insert(path, t)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{path}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every parameter into `g` as a leaf. With `trainable` the
    /// leaves track gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let mut t = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                    .expect("parameter shape is consistent");
                t.set_requires_grad(trainable);
                (k.clone(), g.leaf(t))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients accumulated on bound leaves into the parameters'
    /// own gradient buffers.
    pub fn absorb_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (k, &v) in &bound.vars {
            if let Some(grad) = g.grad(v) {
                self.get_mut(k)?.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// `self ← decay·self + (1 − decay)·source`, parameter by parameter.
    pub fn ema_update(&mut self, source: &ModelParams, decay: f64) -> Result<()> {
        for (k, t) in &mut self.tensors {
            let s = source.get(k)?;
            if s.shape() != t.shape() {
                return Err(Error::dim("ema_update", t.shape(), s.shape()));
            }
            for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        Ok(())
    }

    /// Values only, gradients dropped.
    pub fn detached(&self) -> ModelParams {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent"),
                )
            })
            .collect();
        ModelParams { tensors }
    }

    /// SHA-256 over paths and their `.tnsr` encodings.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            h.update([0u8]);
            h.update(tnsr::to_bytes(t)?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no bound parameter named `{path}`")))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest<C> {
    config: C,
    params: BTreeMap<String, String>,
}

const MANIFEST: &str = "manifest.json";

/// Writes one `.tnsr` per parameter plus `manifest.json` holding `config`
/// and the path → file mapping.
pub fn save_checkpoint<C: Serialize>(dir: &Path, params: &ModelParams, config: &C) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (k, t) in params.iter() {
        let file = format!("{k}.tnsr");
        tnsr::write(dir.join(&file), t)?;
        files.insert(k.to_string(), file);
    }
    let manifest = Manifest {
        config,
        params: files,
    };
    let path = dir.join(MANIFEST);
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<C: DeserializeOwned>(dir: &Path) -> Result<(ModelParams, C)> {
    let path = dir.join(MANIFEST);
    let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest<C> = serde_json::from_str(&body)?;
    let mut params = ModelParams::new();
    for (k, file) in manifest.params {
        params.insert(k, tnsr::read(dir.join(file))?)?;
    }
    Ok((params, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn duplicate_paths_rejected() {
        let mut p = ModelParams::new();
        p.insert("a.w", Tensor::zeros([1])).unwrap();
        assert!(p.insert("a.w", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn ema_moves_towards_source() {
        let mut a = ModelParams::new();
        a.insert("w", Tensor::full([2], 1.0)).unwrap();
        let mut b = ModelParams::new();
        b.insert("w", Tensor::full([2], 3.0)).unwrap();
        a.ema_update(&b, 0.75).unwrap();
        assert_eq!(a.get("w").unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(3, 0);
        let mut p = ModelParams::new();
        p.insert_he("conv.w", &[2, 1, 3, 3], 9, &mut rng).unwrap();
        p.insert("head.b", Tensor::zeros([1, 3])).unwrap();
        save_checkpoint(dir.path(), &p, &serde_json::json!({"k": 1})).unwrap();
        let (q, cfg): (ModelParams, serde_json::Value) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg["k"], 1);
        assert_eq!(q.count(), p.count());
        for (k, t) in p.iter() {
            let back = q.get(k).unwrap();
            assert!(t.max_abs_diff(back).unwrap() < 1e-6);
        }
        assert_eq!(q.digest().unwrap(), q.detached().digest().unwrap());
    }
}
