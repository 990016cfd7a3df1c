//! Named parameter collections, initialization and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{PimmsError, Result};
use crate::tensor::Tensor;

/// Initialization scheme recorded in checkpoint metadata.
pub const INIT_SCHEME: &str = "he-uniform";

/// Named parameter tensors of one or more networks.
///
/// Names are unique; namespaces such as `fmod/` or `phi_t1/` separate the
/// sub-networks. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(PimmsError::invalid("parameter name must not be empty"));
        }
        if self.tensors.contains_key(&name) {
            return Err(PimmsError::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| PimmsError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.tensors.iter().filter(move |(n, _)| n.starts_with(prefix))
    }

    /// Copy every parameter of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.tensors.insert(n.clone(), t.clone());
        }
    }

    /// Keep only parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .with_prefix(prefix)
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Round every value to `f32` precision.
    pub fn round_to_f32(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.round_to_f32()))
                .collect(),
        }
    }
}

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

/// Convolution kernel `k × k × c_in × c_out` and zero bias.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    k: usize,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    store.insert(
        format!("{prefix}/w"),
        he_uniform(rng, &[k, k, c_in, c_out], k * k * c_in),
    )?;
    store.insert(format!("{prefix}/b"), Tensor::zeros(&[c_out]))
}

/// Dense weights `f_in × f_out` and zero bias.
pub fn init_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    f_in: usize,
    f_out: usize,
) -> Result<()> {
    store.insert(format!("{prefix}/w"), he_uniform(rng, &[f_in, f_out], f_in))?;
    store.insert(format!("{prefix}/b"), Tensor::zeros(&[f_out]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * w` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers, keyed like the parameters they track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// `t` is the 1-based step index. Parameters without an entry in `grads`
/// are left untouched, which is how frozen sub-networks are excluded.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(PimmsError::invalid(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    if t == 0 {
        return Err(PimmsError::invalid("adam step index starts at 1"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads {
        let w = params
            .get_mut(name)
            .ok_or_else(|| PimmsError::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if w.shape() != g.shape() {
            return Err(PimmsError::shape(format!(
                "gradient {:?} for parameter `{name}` {:?}",
                g.shape(),
                w.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi + cfg.weight_decay * *wi;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *wi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
