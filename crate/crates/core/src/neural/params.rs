use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradients and adaptive-moment state.
///
/// Iteration order is insertion order, so serialization and optimizer
/// updates are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    steps: u64,
}

const MAGIC: &[u8; 8] = b"RGPARAM1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    header: serde_json::Value,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let [r, c] = value.shape();
        self.params.push(Param {
            name: name.clone(),
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            value,
        });
        self.index.insert(name, id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sum_squares()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    /// One bias-corrected adaptive-moment step using the accumulated gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let grads = p.grad.data();
            let m = p.m.data_mut();
            for (mi, g) in m.iter_mut().zip(grads) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            }
            let v = p.v.data_mut();
            for (vi, g) in v.iter_mut().zip(grads) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Copies values (not optimizer state) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.params.len(), other.params.len(), "store layout mismatch");
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(dst.name, src.name, "store layout mismatch");
            dst.value = src.value.clone();
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape() && bits_eq(&a.value, &b.value))
    }

    /// Writes the container: magic, manifest length (u64 LE), JSON manifest,
    /// then every value as little-endian `f64` in manifest order.
    pub fn write_container<W: Write>(&self, mut w: W, header: &serde_json::Value) -> std::io::Result<()> {
        let manifest = Manifest {
            header: header.clone(),
            params: self
                .params
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in &self.params {
            for x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    /// Reads a container produced by [`write_container`](Self::write_container).
    /// Optimizer state starts fresh.
    pub fn read_container<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
        let bad = |m: &str| Error::Consistency(format!("parameter container: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated manifest length"))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for entry in manifest.params {
            let [rows, cols] = entry.shape;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf).map_err(|_| bad("truncated data"))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(entry.name, Tensor::from_vec(rows, cols, data));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("unreadable trailer"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok((store, manifest.header))
    }

    /// Names and shapes, for checking a loaded store against a freshly built one.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape())).collect()
    }

    /// Replaces all values with those of `loaded`, which must have the same layout.
    pub fn load_values(&mut self, loaded: &ParamStore) -> Result<()> {
        if self.layout() != loaded.layout() {
            return Err(Error::Consistency(
                "checkpoint parameter layout does not match the configured model".into(),
            ));
        }
        self.copy_values_from(loaded);
        Ok(())
    }
}

fn bits_eq(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
