//! Adaptive-moment optimiser over a list of dense tensors.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `params` and `grads` must be in
    /// the order of the shapes given at construction.
    pub fn update(&mut self, lr: f64, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) {
        assert_eq!(params.len(), self.first.len(), "parameter list changed shape");
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            Zip::from(&mut **p).and(*g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
            });
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = array![[1.0, -2.0]];
        let g = array![[0.5, -3.0]];
        let mut opt = Adam::new(AdamConfig::default(), &[(1, 2)]);
        opt.update(0.1, &mut [&mut p], &[&g]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = array![[3.0, -4.0]];
        let mut opt = Adam::new(AdamConfig::default(), &[(1, 2)]);
        for _ in 0..2000 {
            let g = &p * 2.0;
            opt.update(0.05, &mut [&mut p], &[&g]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut a = array![[3.0, 4.0]];
        let before = clip_global_norm(&mut [&mut a], 1.0);
        assert_eq!(before, 5.0);
        assert!((a[[0, 0]] - 0.6).abs() < 1e-12);
    }
}
