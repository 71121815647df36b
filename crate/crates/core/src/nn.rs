//! Named parameter storage and the small layer vocabulary shared by the
//! denoiser, text encoder, and classifiers.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::ops::Conv2dGeom;
use crate::tensor::{checkpoint, Tensor};

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Parameters keyed by layer path, iterated in lexical order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Param { value: value.as_param(), frozen: false });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replace a value, keeping the frozen flag. Shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch { op: "set", shapes: vec![p.value.shape().to_vec(), value.shape().to_vec()] });
        }
        p.value = if p.frozen { value.detach() } else { value.as_param() };
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar parameter count, optionally restricted by name predicate.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(k, _)| filter(k)).map(|(_, p)| p.value.len()).sum()
    }

    /// Frozen parameters are stored as constants so no graph is recorded
    /// through them.
    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.entries.values_mut() {
            p.frozen = frozen;
            p.value = if frozen { p.value.detach() } else { p.value.as_param() };
        }
    }

    /// SHA-256 over every name, shape, and payload in order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(p.value.digest());
        }
        h.finalize().into()
    }

    /// Per-buffer SHA-256, for frozen-base audits.
    pub fn buffer_digests(&self) -> BTreeMap<String, [u8; 32]> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.value.digest())).collect()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    /// Overwrite values from checkpoint entries; every stored name must be
    /// present with a matching shape, and reserved `__` entries are skipped.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut seen = 0;
        for (name, t) in entries.iter().filter(|(n, _)| !n.starts_with("__")) {
            self.set(name, t.clone())?;
            seen += 1;
        }
        if seen != self.entries.len() {
            return Err(Error::invalid(format!("checkpoint holds {seen} of {} parameters", self.entries.len())));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }
}

pub fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn init_normal(store: &mut ParamStore, name: String, shape: &[usize], std: f32, rng: &mut RngStream) {
    let mut sub = rng.substream(&name);
    store.insert(name, Tensor::randn(shape, std, &mut sub));
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, path: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut RngStream) -> Self {
        let weight = format!("{path}.weight");
        init_normal(store, weight.clone(), &[d_in, d_out], (1.0 / d_in as f32).sqrt(), rng);
        let bias = bias.then(|| {
            let b = format!("{path}.bias");
            store.insert(b.clone(), Tensor::zeros(&[d_out]));
            b
        });
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(store.get(&self.weight)?)?;
        match &self.bias {
            Some(b) => y.add_bias(store.get(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub geom: Conv2dGeom,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: Conv2dGeom,
        rng: &mut RngStream,
    ) -> Self {
        let weight = format!("{path}.weight");
        let fan_in = c_in * kernel * kernel;
        init_normal(store, weight.clone(), &[c_out, c_in, kernel, kernel], (1.0 / fan_in as f32).sqrt(), rng);
        let bias = format!("{path}.bias");
        store.insert(bias.clone(), Tensor::zeros(&[c_out]));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.conv2d(store.get(&self.weight)?, Some(store.get(&self.bias)?), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize, groups: usize) -> Self {
        let gamma = format!("{path}.gamma");
        let beta = format!("{path}.beta");
        store.insert(gamma.clone(), Tensor::full(&[channels], 1.0));
        store.insert(beta.clone(), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.group_norm(self.groups, store.get(&self.gamma)?, store.get(&self.beta)?, 1e-5)
    }
}
