//! Transformer encoder mapping per-spot features to per-spot steps.
//!
//! ```text
//! h₀ = z·W_in + b_in + rms(prev_hidden)·W_rec
//! for each layer:
//!     h += Attn(rope(rms(h)·Wq), rope(rms(h)·Wk), rms(h)·Wv)·Wo
//!     h += (silu(rms(h)·Wg) ⊙ rms(h)·Wu)·Wd
//! hidden = h
//! step   = (rms(h)·w_head + b_head) · step_scale
//! ```
//!
//! `W_rec`, `w_head` and `b_head` start at zero, so an untrained network
//! returns zero steps and ignores the recurrent input.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::HeadLayout;
use crate::error::{L2oError, Result};
use crate::features::N_FEATURES;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct L2OConfig {
    pub n_features: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub rope_base: f64,
    pub max_spots: usize,
    pub step_scale_init: f64,
    pub attention_block: usize,
    pub seed: u64,
}

impl Default for L2OConfig {
    fn default() -> Self {
        Self {
            n_features: N_FEATURES,
            hidden: 256,
            intermediate: 512,
            n_layers: 6,
            n_heads: 8,
            n_kv_heads: 4,
            rope_base: 500_000.0,
            max_spots: 25_000,
            step_scale_init: 1e-2,
            attention_block: 128,
            seed: 0,
        }
    }
}

impl L2OConfig {
    /// Narrow two-layer variant for single-core training runs.
    pub fn compact() -> Self {
        Self { hidden: 64, intermediate: 128, n_layers: 2, n_heads: 4, n_kv_heads: 2, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads.max(1)
    }

    pub fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(self.n_heads, self.n_kv_heads, self.head_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.intermediate == 0 || self.n_layers == 0 || self.n_features == 0 {
            return Err(L2oError::Config("dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return Err(L2oError::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.n_heads)));
        }
        if self.head_dim() % 2 != 0 {
            return Err(L2oError::Config(format!("head dim {} must be even for rotary embedding", self.head_dim())));
        }
        if !(self.rope_base > 1.0) || !(self.step_scale_init.is_finite()) {
            return Err(L2oError::Config("rope base must exceed 1 and the step scale must be finite".into()));
        }
        self.layout().map(|_| ())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct L2ONetwork {
    pub config: L2OConfig,
    pub names: Vec<String>,
    pub params: Vec<Array2<f64>>,
}

/// Parameter nodes bound on one tape, in the network's parameter order.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

struct LayerIdx {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    mlp_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

const INPUT_W: usize = 0;
const INPUT_B: usize = 1;
const REC_NORM: usize = 2;
const REC_W: usize = 3;
const LAYER_START: usize = 4;
const PER_LAYER: usize = 9;

impl L2ONetwork {
    pub fn new(config: L2OConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let d = config.head_dim();
        let kv = config.n_kv_heads * d;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, value: Array2<f64>| {
            names.push(name);
            params.push(value);
        };
        let mut gaussian = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        add("input.weight".into(), gaussian(config.n_features, h, 1.0 / (config.n_features as f64).sqrt()));
        add("input.bias".into(), Array2::zeros((1, h)));
        add("recurrent.norm".into(), Array2::ones((1, h)));
        add("recurrent.weight".into(), Array2::zeros((h, h)));
        for l in 0..config.n_layers {
            let std_h = 1.0 / (h as f64).sqrt();
            add(format!("layers.{l}.attn_norm"), Array2::ones((1, h)));
            add(format!("layers.{l}.wq"), gaussian(h, config.n_heads * d, std_h));
            add(format!("layers.{l}.wk"), gaussian(h, kv, std_h));
            add(format!("layers.{l}.wv"), gaussian(h, kv, std_h));
            add(format!("layers.{l}.wo"), gaussian(config.n_heads * d, h, std_h * resid));
            add(format!("layers.{l}.mlp_norm"), Array2::ones((1, h)));
            add(format!("layers.{l}.w_gate"), gaussian(h, config.intermediate, std_h));
            add(format!("layers.{l}.w_up"), gaussian(h, config.intermediate, std_h));
            add(
                format!("layers.{l}.w_down"),
                gaussian(config.intermediate, h, resid / (config.intermediate as f64).sqrt()),
            );
        }
        add("final_norm".into(), Array2::ones((1, h)));
        add("head.weight".into(), Array2::zeros((h, 1)));
        add("head.bias".into(), Array2::zeros((1, 1)));
        add("step_scale".into(), Array2::from_elem((1, 1), config.step_scale_init));
        Ok(Self { config, names, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    fn layer(&self, l: usize) -> LayerIdx {
        let b = LAYER_START + l * PER_LAYER;
        LayerIdx {
            attn_norm: b,
            wq: b + 1,
            wk: b + 2,
            wv: b + 3,
            wo: b + 4,
            mlp_norm: b + 5,
            w_gate: b + 6,
            w_up: b + 7,
            w_down: b + 8,
        }
    }

    fn tail(&self) -> usize {
        LAYER_START + self.config.n_layers * PER_LAYER
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect() }
    }

    pub fn check_spots(&self, n: usize) -> Result<()> {
        if n > self.config.max_spots {
            return Err(L2oError::TooManySpots { got: n, max: self.config.max_spots });
        }
        Ok(())
    }

    /// Builds the forward pass on `tape`. Returns `(steps [N, 1], hidden
    /// [N, hidden])`; steps are relative and scaled by the caller.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        features: Var,
        prev_hidden: Option<Var>,
        positions: Arc<Vec<f64>>,
    ) -> Result<(Var, Var)> {
        let n = tape.value(features).nrows();
        self.check_spots(n)?;
        if tape.value(features).ncols() != self.config.n_features || positions.len() != n {
            return Err(L2oError::Shape(format!(
                "features {:?} with {} positions for a {}-feature network",
                tape.value(features).dim(),
                positions.len(),
                self.config.n_features
            )));
        }
        let v = |i: usize| p.vars[i];
        let layout = self.config.layout()?;
        let d = self.config.head_dim();
        let base = self.config.rope_base;
        let block = self.config.attention_block;

        let prev = match prev_hidden {
            Some(h) => h,
            None => tape.constant(Array2::zeros((n, self.config.hidden))),
        };
        let x = tape.matmul(features, v(INPUT_W))?;
        let mut h = tape.add_row(x, v(INPUT_B))?;
        let pn = tape.rms_norm(prev, v(REC_NORM))?;
        let rec = tape.matmul(pn, v(REC_W))?;
        h = tape.add(h, rec)?;
        for l in 0..self.config.n_layers {
            let li = self.layer(l);
            let a = tape.rms_norm(h, v(li.attn_norm))?;
            let q = tape.matmul(a, v(li.wq))?;
            let q = tape.rope(q, positions.clone(), d, base)?;
            let k = tape.matmul(a, v(li.wk))?;
            let k = tape.rope(k, positions.clone(), d, base)?;
            let vv = tape.matmul(a, v(li.wv))?;
            let o = tape.attention(q, k, vv, layout, block)?;
            let o = tape.matmul(o, v(li.wo))?;
            h = tape.add(h, o)?;
            let b = tape.rms_norm(h, v(li.mlp_norm))?;
            let gate = tape.matmul(b, v(li.w_gate))?;
            let up = tape.matmul(b, v(li.w_up))?;
            let act = tape.swiglu(gate, up)?;
            let down = tape.matmul(act, v(li.w_down))?;
            h = tape.add(h, down)?;
        }
        let t = self.tail();
        let f = tape.rms_norm(h, v(t))?;
        let y = tape.matmul(f, v(t + 1))?;
        let y = tape.add_row(y, v(t + 2))?;
        let steps = tape.scale_by(y, v(t + 3))?;
        Ok((steps, h))
    }

    /// Evaluation-mode forward pass.
    pub fn forward(
        &self,
        features: &Array2<f64>,
        prev_hidden: Option<&Array2<f64>>,
        positions: &[f64],
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let prev = prev_hidden.map(|h| tape.constant(h.clone()));
        let (steps, hidden) = self.forward_tape(&mut tape, &p, f, prev, Arc::new(positions.to_vec()))?;
        Ok((tape.value(steps).column(0).to_vec(), tape.value(hidden).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_dimensions() {
        let cfg = L2OConfig::default();
        assert_eq!(cfg.head_dim(), 32);
        assert_eq!(cfg.layout().unwrap().group(), 2);
        let net = L2ONetwork::new(cfg).unwrap();
        let h = 256;
        let per_layer = 2 * h + h * 256 + 2 * h * 128 + 256 * h + 3 * h * 512;
        let expected = 60 * h + h + h + h * h + 6 * per_layer + h + h + 1 + 1;
        assert_eq!(net.n_params(), expected);
    }

    #[test]
    fn zero_head_gives_zero_steps() {
        let net = L2ONetwork::new(L2OConfig::compact()).unwrap();
        let (steps, hidden) = net.forward(&Array2::zeros((5, N_FEATURES)), None, &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(steps.iter().all(|&s| s == 0.0));
        assert_eq!(hidden.dim(), (5, 64));
    }

    #[test]
    fn absent_hidden_equals_zero_hidden() {
        let mut net = L2ONetwork::new(L2OConfig::compact()).unwrap();
        net.param_mut("head.weight").unwrap().fill(0.3);
        net.param_mut("recurrent.weight").unwrap().fill(0.1);
        let f = Array2::from_shape_fn((4, N_FEATURES), |(i, j)| ((i * 7 + j) % 5) as f64 - 2.0);
        let pos = [0.0, 1.0, 2.0, 3.0];
        let a = net.forward(&f, None, &pos).unwrap();
        let b = net.forward(&f, Some(&Array2::zeros((4, 64))), &pos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_spots_rejected() {
        let cfg = L2OConfig { max_spots: 3, ..L2OConfig::compact() };
        let net = L2ONetwork::new(cfg).unwrap();
        let err = net.forward(&Array2::zeros((4, N_FEATURES)), None, &[0.0; 4]).unwrap_err();
        assert!(matches!(err, L2oError::TooManySpots { got: 4, max: 3 }));
    }
}
