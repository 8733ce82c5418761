//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::fnv1a;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), keyed by stable dotted names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Tensor<F>>,
    buffers: BTreeMap<String, Tensor<F>>,
    frozen: bool,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            frozen: false,
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        assert!(!self.buffers.contains_key(&name), "{name} already a buffer");
        assert!(
            self.params.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "{name} already a parameter"
        );
        assert!(
            self.buffers.insert(name.clone(), t).is_none(),
            "duplicate buffer {name}"
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        if let Some(t) = self.params.get_mut(name) {
            return Ok(t);
        }
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.buffers.iter()
    }

    /// Parameters then buffers, each in name order.
    pub fn all(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    /// Trainable scalar count (buffers excluded).
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// FNV-1a over names, shapes and the bit patterns of every scalar.
    pub fn checksum(&self) -> u32 {
        let mut bytes = Vec::new();
        for (name, t) in self.all() {
            bytes.extend_from_slice(name.as_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.f64().to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Places every tensor on `tape`: trainable parameters as leaves unless
    /// the store is frozen, buffers always as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if self.frozen {
                tape.constant(t.clone())
            } else {
                tape.leaf(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        for (name, t) in &self.buffers {
            vars.insert(name.clone(), tape.constant(t.clone()));
        }
        Bound { vars }
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'t, F: Real> {
    vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Real> Bound<'t, F> {
    pub fn get(&self, name: &str) -> Result<&Var<'t, F>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    /// Gradients collected on `tape` for every tracked parameter.
    pub fn grads(&self, tape: &Tape<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| tape.grad(v).map(|g| (n.clone(), g)))
            .collect()
    }

    pub fn tracked_count(&self) -> usize {
        self.vars.values().filter(|v| v.is_tracked()).count()
    }
}

/// Deterministic per-tensor RNG derived from a model seed and the name.
pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let h = fnv1a(name.as_bytes()) as u64;
    ChaCha8Rng::seed_from_u64(seed ^ (h << 32 | h.rotate_left(7)))
}

/// Uniform `±sqrt(3 / fan_in)`: unit-variance activations for unit-variance
/// inputs.
pub fn lecun_uniform<F: Real>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    uniform(seed, name, shape, bound)
}

pub fn uniform<F: Real>(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor<F> {
    let mut rng = name_rng(seed, name);
    Tensor::from_fn(shape, |_| F::c(rng.random_range(-bound..=bound)))
}
