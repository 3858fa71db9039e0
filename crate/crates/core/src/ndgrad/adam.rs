//! Adam optimizer with externally owned parameters.

use std::collections::BTreeMap;

use super::{NdError, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first/second moment estimates per parameter name plus a
/// shared step count. Parameters live outside the optimizer and are updated
/// in place.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every named parameter using the matching
    /// gradient. Parameters without a gradient entry are left untouched;
    /// the step count always advances by exactly one.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<(), NdError> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != p.numel() {
                return Err(NdError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {name}: {} values vs {} gradients", p.numel(), g.len()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> BTreeMap<String, Tensor> {
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // With g = 3: m̂ = 3, v̂ = 9, so Δ = lr·3/(3+eps) ≈ lr.
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut params = one_param(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![3.0]);
        let mut opt = Adam::new(cfg);
        opt.step(&mut params, &grads).unwrap();
        let got = params["w"].data()[0];
        let want = 1.0 - 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut params = one_param(0.7);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params["w"].data()[0], 0.7);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn mismatched_gradient_length_is_rejected() {
        let mut params = one_param(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
