//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use super::params::{GradStore, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first and second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Tensor> {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        AdamW {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * w[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: Vec<f64>) -> (ParamStore, crate::nn::ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row_vector(value)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = one_param(vec![0.5, -2.0]);
        let grads = GradStore::zeros_like(&store);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..3 {
            opt.step(&mut store, &grads);
        }
        assert_eq!(store.get(id).data(), &[0.5, -2.0]);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_lambda_w() {
        let (mut store, id) = one_param(vec![0.5, -2.0]);
        let grads = GradStore::zeros_like(&store);
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &grads);
        let w = store.get(id).data();
        assert!((w[0] - (0.5 - 0.1 * 0.01 * 0.5)).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    // Two steps worked by hand: g1 = 0.2, g2 = -0.1, w0 = 1.0.
    #[test]
    fn two_steps_match_hand_arithmetic() {
        let (mut store, id) = one_param(vec![1.0]);
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut grads = GradStore::zeros_like(&store);

        grads.accumulate(id, &Tensor::scalar(0.2));
        opt.step(&mut store, &grads);
        // m = 0.02, v = 4e-5, m̂ = 0.2, v̂ = 0.04, update = 0.2/(0.2+1e-8)
        let w1 = 1.0 - 0.01 * (0.2 / (0.2 + 1e-8) + 0.1 * 1.0);
        assert!((store.get(id).item() - w1).abs() < 1e-15);

        grads.zero();
        grads.accumulate(id, &Tensor::scalar(-0.1));
        opt.step(&mut store, &grads);
        let m: f64 = 0.9 * 0.02 + 0.1 * -0.1;
        let v: f64 = 0.999 * 4e-5 + 0.001 * 0.01;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let w2 = w1 - 0.01 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.1 * w1);
        assert!((store.get(id).item() - w2).abs() < 1e-15);
    }
}
