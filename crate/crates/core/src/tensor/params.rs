//! Named parameter store with deterministic iteration order and
//! seeded initialization helpers.

use super::Tensor;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Map from parameter name to tensor, iterated in insertion order.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for t in &self.tensors {
            t.zero_grad();
        }
    }
}

/// Stable seed derivation: every stochastic consumer gets a named child
/// stream of the root seed (FNV-1a over the name, folded with the root).
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ root.wrapping_mul(0x9e3779b97f4a7c15)
}

pub fn seeded_rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name))
}

/// Fan-based uniform (Xavier/Glorot) initialization.
pub fn xavier_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// Small normal init for embeddings and positional tables.
pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    // Box-Muller keeps us off rand_distr for one call site.
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}
