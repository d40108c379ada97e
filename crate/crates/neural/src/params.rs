use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NeuralError, Result};
use crate::tensor::Tensor;

/// Stable 64-bit seed for a parameter path (FNV-1a over the path, mixed with
/// the master seed).
pub fn path_seed(master: u64, path: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named parameters, iterated in sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(NeuralError::DuplicateParam(path));
        }
        self.tensors.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| NeuralError::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| NeuralError::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Affine layer `path/w` of shape `[fan_in, fan_out]` drawn from
    /// uniform(±1/√fan_in), and an optional zero bias `path/b`.
    pub fn add_affine(
        &mut self,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        seed: u64,
    ) -> Result<()> {
        let w_path = format!("{path}/w");
        let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, &w_path));
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(w_path, Tensor::matrix(fan_in, fan_out, data)?)?;
        if bias {
            self.insert(format!("{path}/b"), Tensor::zeros(vec![fan_out]))?;
        }
        Ok(())
    }

    pub fn add_layer_norm(&mut self, path: &str, dim: usize) -> Result<()> {
        self.insert(format!("{path}/gain"), Tensor::full(vec![dim], 1.0))?;
        self.insert(format!("{path}/bias"), Tensor::zeros(vec![dim]))
    }

    pub fn add_embedding(&mut self, path: &str, count: usize, dim: usize, seed: u64) -> Result<()> {
        let t_path = format!("{path}/table");
        let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, &t_path));
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..count * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(t_path, Tensor::matrix(count, dim, data)?)
    }

    /// Zero every parameter whose path starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (path, t) in self.tensors.iter_mut() {
            if path.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Scalar metadata stored as a one-element tensor under `path`.
    pub fn set_meta(&mut self, path: impl Into<String>, value: f64) {
        self.tensors.insert(path.into(), Tensor::full(vec![1], value));
    }

    pub fn meta(&self, path: &str) -> Result<f64> {
        Ok(self.get(path)?.data()[0])
    }

    /// Copy of every tensor under `prefix`, re-rooted under `new_prefix`.
    pub fn rerooted(&self, prefix: &str, new_prefix: &str) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .map(|rest| (format!("{new_prefix}{rest}"), v.clone()))
            })
            .collect();
        ParamSet { tensors }
    }

    /// Insert all tensors of `other`; paths must not collide.
    pub fn merge(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// `self ← (1 − rate)·self + rate·source`, matched by path.
    pub fn polyak_update(&mut self, source: &ParamSet, rate: f64) -> Result<()> {
        for (path, t) in self.tensors.iter_mut() {
            let s = source.get(path)?;
            if s.len() != t.len() {
                return Err(NeuralError::Shape {
                    layer: path.clone(),
                    detail: "polyak source has a different size".into(),
                });
            }
            for (d, &v) in t.data_mut().iter_mut().zip(s.data()) {
                *d = (1.0 - rate) * *d + rate * v;
            }
        }
        Ok(())
    }
}
