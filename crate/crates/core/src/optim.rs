//! Adam optimizer over a named parameter set.

use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are aligned with the
/// parameter set's insertion order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            cfg,
            t: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = &grads.0[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = params.tensor_at_mut(i).data_mut();
            for j in 0..data.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / b1t;
                let v_hat = v[j] / b2t;
                data[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let before = params.get("w").unwrap().data().to_vec();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &params);
        let grads = Gradients(vec![vec![5.0, -3.0]]);
        adam.step(&mut params, &grads);
        assert_eq!(params.get("w").unwrap().data(), before.as_slice());
    }

    #[test]
    fn step_moves_against_gradient() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        let grads = Gradients(vec![vec![1.0, -1.0]]);
        adam.step(&mut params, &grads);
        let after = params.get("w").unwrap().data();
        assert!(after[0] < 1.0);
        assert!(after[1] > 1.0);
    }
}
