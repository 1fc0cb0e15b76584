//! Outer optimizer: Adam with decoupled weight decay, cosine learning-rate
//! annealing and global gradient-norm clipping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

/// `lr₀·½(1 + cos(π·step/total))`, clamped to 0 past `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Array2<f64>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    /// One update at learning rate `lr`. `decay_mask[i]` selects which
    /// tensors receive weight decay.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64, decay_mask: &[bool]) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let decay = if decay_mask.get(i).copied().unwrap_or(false) { lr * c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut params[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= decay * *p;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(4e-4, 0, 100), 4e-4);
        assert!(cosine_lr(4e-4, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(4e-4, 50, 100) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Array2::from_elem((1, 2), 3.0), Array2::from_elem((1, 2), 4.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 50f64.sqrt()).abs() < 1e-12);
        let after = clip_global_norm(&mut g, 1.0);
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Array2::from_elem((1, 1), 1.0)];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        opt.step(&mut p, &[Array2::from_elem((1, 1), 5.0)], 0.1, &[false]);
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6);
    }
}
