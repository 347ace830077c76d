//! Adam over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut a = Adam::new(2, AdamConfig::default());
        let mut p = [1.0, -1.0];
        a.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut a = Adam::new(3, AdamConfig::default());
        let mut p = [0.5, 0.25, -2.0];
        for _ in 0..10 {
            a.step(&mut p, &[0.0; 3], 1.0);
        }
        assert_eq!(p, [0.5, 0.25, -2.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(1, AdamConfig::default());
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            a.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
