//! Named parameter arrays, binding into the autodiff graph, and Adam.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Grads, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Buffers (e.g. power-iteration vectors) are stored and checkpointed
    /// but never optimized.
    pub trainable: bool,
}

/// Ordered collection of named arrays belonging to one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>, trainable: bool) {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        self.entries.insert(name.into(), ParamEntry { shape: shape.to_vec(), data, trainable });
    }

    /// Weight drawn from N(0, std²).
    pub fn insert_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        self.insert(name, shape, data, true);
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n], true);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Creates graph leaves for every entry. Trainable entries become
    /// gradient-collecting leaves when `trainable` is set.
    pub fn bind(&self, trainable: bool) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|(k, e)| {
                let t = if trainable && e.trainable {
                    Tensor::param(e.data.clone(), &e.shape)
                } else {
                    Tensor::new(e.data.clone(), &e.shape)
                };
                (k.clone(), t)
            })
            .collect();
        Bound { tensors }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.feed_digest(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn feed_digest(&self, h: &mut Sha256) {
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for d in &e.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
    }

    /// Merges another store under `prefix/`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, e) in &other.entries {
            self.entries.insert(format!("{prefix}/{k}"), e.clone());
        }
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}/");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, e)| k.strip_prefix(&p).map(|s| (s.to_string(), e.clone())))
            .collect();
        ParamStore { entries }
    }

    /// Replaces values of existing entries; names and shapes must match.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for (k, e) in &mut self.entries {
            let src = other.entries.get(k).ok_or_else(|| format!("missing parameter `{k}`"))?;
            if src.shape != e.shape {
                return Err(format!("parameter `{k}`: shape {:?} != expected {:?}", src.shape, e.shape));
            }
            e.data.clone_from(&src.data);
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(format!("unexpected parameter `{extra}`"));
        }
        Ok(())
    }
}

/// Graph leaves for one forward pass.
#[derive(Debug)]
pub struct Bound {
    tensors: HashMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    /// Swaps in a different tensor for one entry, e.g. to probe gradients
    /// with respect to a single array.
    pub fn replace(mut self, name: &str, t: Tensor) -> Bound {
        assert!(self.tensors.contains_key(name), "no parameter named `{name}`");
        self.tensors.insert(name.to_string(), t);
        self
    }

    /// Collects gradients of trainable leaves after a backward sweep.
    pub fn gradients(&self, grads: &Grads) -> BTreeMap<String, Vec<f64>> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, t)| (k.clone(), grads.get_or_zeros(t)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moment buffers keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), &p.shape, vec![0.0; g.len()], false);
                self.v.insert(name.clone(), &p.shape, vec![0.0; g.len()], false);
            }
            let m = &mut self.m.get_mut(name).unwrap().data;
            let v = &mut self.v.get_mut(name).unwrap().data;
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Box–Muller standard normal draw.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
