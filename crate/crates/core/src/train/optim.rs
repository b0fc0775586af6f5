//! Adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update. Parameters and moments are rounded to `f32`
    /// afterwards so that checkpoints reproduce the in-memory state exactly.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            let m = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            self.m[i] = m as f32 as f64;
            self.v[i] = v as f32 as f64;
            let update = cfg.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps);
            params[i] = (params[i] - update) as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params: Vec<f64> = vec![0.5, -0.25, 1.0];
        let before = params.clone();
        let mut adam = Adam::new(3);
        adam.step(&AdamConfig::default(), &mut params, &[0.0; 3]);
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![1.0];
        let mut adam = Adam::new(1);
        let cfg = AdamConfig::default();
        adam.step(&cfg, &mut params, &[3.0]);
        assert!((params[0] - (1.0 - cfg.lr)).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![2.0f64, -3.0];
        let mut adam = Adam::new(2);
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(&cfg, &mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
