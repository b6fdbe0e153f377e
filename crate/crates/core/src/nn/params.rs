use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type ParamId = usize;

/// Ordered collection of named parameter arrays.
///
/// Values are stored as `f64` but kept representable in `f32` (see
/// [`ParamSet::round_to_f32`]), which is what checkpoints persist.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let (id, _) = self.entries.insert_full(name.into(), value);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id).map(|(k, _)| k.as_str()).expect("param id in range")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn round_to_f32(&mut self) {
        for a in self.entries.values_mut() {
            a.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces values from another set with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, value) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Shape(format!("parameter `{name}` missing from source")))?;
            if src.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected shape {:?}, found {:?}",
                    value.shape(),
                    src.shape()
                )));
            }
            value.assign(src);
        }
        if other.len() != self.len() {
            return Err(Error::Shape(format!(
                "source has {} parameters, expected {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Deterministic initializer fed from a single seeded stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Zero-mean normal with the given standard deviation.
    pub fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(&mut self.rng) as f32 as f64)
    }

    /// He-normal for a conv kernel `[kh, kw, fan_in_channels, out]`.
    pub fn he(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> ArrayD<f64> {
        self.normal(shape, gain * (2.0 / fan_in as f64).sqrt())
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients { grads: params.entries.values().map(|a| ArrayD::zeros(a.raw_dim())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.grads.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.grads {
            a.mapv_inplace(|v| v * k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|a| a.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}
