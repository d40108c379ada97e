use std::collections::BTreeMap;

use crate::error::{NeuralError, Result};
use crate::params::ParamSet;
use crate::tape::ParamGrads;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates per parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamSet, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if let Some(path) = params.paths().find(|p| !grads.contains_key(*p)) {
        return Err(NeuralError::MissingGrad(path.to_string()));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (path, p) in params.iter_mut() {
        let g = &grads[path];
        if g.len() != p.len() {
            return Err(NeuralError::Shape {
                layer: path.to_string(),
                detail: format!("gradient has {} elements, parameter {}", g.len(), p.len()),
            });
        }
        let m = state.first.entry(path.to_string()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.second.entry(path.to_string()).or_insert_with(|| vec![0.0; p.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_set(path: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(path, Tensor::full(vec![1], v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = ParamSet::new();
        params.add_affine("l", 3, 2, true, 7).unwrap();
        let before = params.clone();
        let grads: ParamGrads = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        let mut state = AdamState::new(AdamConfig::default());
        for i in 1..=5 {
            adam_step(&mut params, &grads, &mut state).unwrap();
            assert_eq!(state.step_count(), i);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε).
        let mut params = scalar_set("x", 0.0);
        let grads: ParamGrads = [("x".to_string(), Tensor::full(vec![1], 1.0))].into();
        let mut state = AdamState::new(AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        adam_step(&mut params, &grads, &mut state).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_parameters_move_identically() {
        let mut params = scalar_set("a", 0.5);
        params.insert("b", Tensor::full(vec![1], 0.5)).unwrap();
        let mut state = AdamState::new(AdamConfig::default());
        for g in [0.3, -1.2, 4.0] {
            let grads: ParamGrads = ["a", "b"]
                .iter()
                .map(|k| (k.to_string(), Tensor::full(vec![1], g)))
                .collect();
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params.get("a").unwrap(), params.get("b").unwrap());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = scalar_set("a", 0.0);
        let mut state = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut params, &ParamGrads::new(), &mut state).unwrap_err();
        assert!(matches!(err, NeuralError::MissingGrad(p) if p == "a"));
        assert_eq!(state.step_count(), 0);
    }
}
