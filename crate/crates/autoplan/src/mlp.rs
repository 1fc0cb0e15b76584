//! Small fully connected tanh network with manual backpropagation.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Layers `W_i [in, out]`, `b_i [1, out]`; tanh between layers, linear
/// output. Parameters are stored as `[W0, b0, W1, b1, …]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub params: Vec<Array2<f64>>,
}

pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Xavier-uniform hidden layers; the output layer is scaled by
    /// `out_scale` (0 gives a zero output at initialization).
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if i + 2 == sizes.len() { out_scale } else { 1.0 };
            let normal = Normal::new(0.0, std).expect("positive std");
            params.push(Array2::from_shape_fn((fan_in, fan_out), |_| scale * normal.sample(rng)));
            params.push(Array2::zeros((1, fan_out)));
        }
        Self { params }
    }

    pub fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.params[self.params.len() - 1].ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            let z = h.dot(&self.params[2 * l]) + &self.params[2 * l + 1];
            inputs.push(h);
            h = if l + 1 < self.n_layers() { z.mapv(f64::tanh) } else { z };
        }
        (h, MlpCache { inputs })
    }

    /// Parameter gradients for upstream gradient `d_out` of the output.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut grads = vec![Array2::zeros((0, 0)); self.params.len()];
        let mut d = d_out.clone();
        for l in (0..self.n_layers()).rev() {
            let input = &cache.inputs[l];
            grads[2 * l] = input.t().dot(&d);
            grads[2 * l + 1] = d.sum_axis(Axis(0)).insert_axis(Axis(0));
            if l > 0 {
                let dh = d.dot(&self.params[2 * l].t());
                // input = tanh(z) for every layer after the first.
                d = dh * input.mapv(|a| 1.0 - a * a);
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 5, 2], 1.0, &mut rng);
        net.params[1].fill(0.1);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let w = Array2::from_shape_fn((4, 2), |(i, j)| 1.0 + i as f64 - 0.5 * j as f64);
        let loss = |n: &Mlp| (n.forward(&x).0 * &w).sum();
        let (_, cache) = net.forward(&x);
        let grads = net.backward(&cache, &w);
        for p in 0..net.params.len() {
            for idx in 0..net.params[p].len() {
                let (r, c) = (idx / net.params[p].ncols(), idx % net.params[p].ncols());
                let h = 1e-6;
                let mut a = net.clone();
                a.params[p][[r, c]] += h;
                let mut b = net.clone();
                b.params[p][[r, c]] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - grads[p][[r, c]]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_output_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[4, 8, 3], 0.0, &mut rng);
        let (y, _) = net.forward(&Array2::ones((2, 4)));
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
