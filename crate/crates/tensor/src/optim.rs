use serde::{Deserialize, Serialize};

use crate::param::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step along `grads` (aligned with `params`).
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Vec<f64>]) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.values.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParameterSet::new();
        ps.insert("w", &[2], vec![1.0, -1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps, &[vec![3.0, -0.01]]);
        let w = &ps.get("w").unwrap().values;
        assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParameterSet::new();
        ps.insert("w", &[1], vec![5.0]).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &ps);
        for _ in 0..500 {
            let w = ps.get("w").unwrap().values[0];
            adam.step(&mut ps, &[vec![2.0 * (w - 2.0)]]);
        }
        assert!((ps.get("w").unwrap().values[0] - 2.0).abs() < 1e-2);
    }
}
