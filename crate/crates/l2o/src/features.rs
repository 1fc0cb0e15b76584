//! Network inputs: normalised gradient, normalised momentum and normalised
//! split gradients.
//!
//! ```text
//! m_t = β1·m_{t-1} + (1-β1)·g_t        m̂_t = m_t / (1-β1^t)
//! v_t = β2·v_{t-1} + (1-β2)·g_t²       v̂_t = v_t / (1-β2^t)
//! g̃ = g_t / (√v̂_t + ε)   m̃ = m̂_t / (√v̂_t + ε)   g̃_k = g_{k,t} / (√v̂_t + ε)
//! ```
//!
//! Columns are `[g̃, m̃, g̃_slot0 … g̃_slot57]`.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{L2oError, Result};
use crate::slots::N_SLOTS;
use crate::tape::{column, ObjectiveAt, Tape, Var};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.99;
pub const EPS: f64 = 1e-8;
pub const N_FEATURES: usize = N_SLOTS + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl MomentState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Folds in the gradient of the next iteration.
    pub fn advance(&mut self, g: &[f64]) {
        self.t += 1;
        for ((m, v), &gi) in self.m.iter_mut().zip(&mut self.v).zip(g) {
            *m = BETA1 * *m + (1.0 - BETA1) * gi;
            *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
        }
    }

    pub fn bias_corrections(&self) -> (f64, f64) {
        (1.0 - BETA1.powi(self.t as i32), 1.0 - BETA2.powi(self.t as i32))
    }

    /// `√v̂ + ε` per spot.
    pub fn denominator(&self) -> Result<Vec<f64>> {
        if self.t == 0 {
            return Err(L2oError::NoGradientYet);
        }
        let (_, c2) = self.bias_corrections();
        Ok(self.v.iter().map(|v| (v / c2).sqrt() + EPS).collect())
    }
}

/// Feature matrix `[N, N_SLOTS + 2]` from advanced moments, the current
/// gradient and the slot-placed split gradients `[N, N_SLOTS]`.
pub fn assemble_features(moments: &MomentState, g: &[f64], split: &Array2<f64>) -> Result<Array2<f64>> {
    let denom = moments.denominator()?;
    let n = g.len();
    if split.dim() != (n, N_SLOTS) || moments.m.len() != n {
        return Err(L2oError::Shape(format!("features for {n} spots with split {:?}", split.dim())));
    }
    let (c1, _) = moments.bias_corrections();
    let mut out = Array2::zeros((n, N_FEATURES));
    for i in 0..n {
        out[[i, 0]] = g[i] / denom[i];
        out[[i, 1]] = moments.m[i] / c1 / denom[i];
        for s in 0..N_SLOTS {
            out[[i, 2 + s]] = split[[i, s]] / denom[i];
        }
    }
    Ok(out)
}

/// Moments as tape nodes so that the meta-gradient sees their dependence on
/// earlier iterates within a window.
#[derive(Clone, Copy, Debug)]
pub struct TapeMoments {
    pub m: Var,
    pub v: Var,
    pub t: u32,
}

impl TapeMoments {
    pub fn from_state(tape: &mut Tape, state: &MomentState) -> Self {
        Self {
            m: tape.constant(column(state.m.clone())),
            v: tape.constant(column(state.v.clone())),
            t: state.t,
        }
    }

    pub fn to_state(self, tape: &Tape) -> MomentState {
        MomentState { m: tape.value(self.m).column(0).to_vec(), v: tape.value(self.v).column(0).to_vec(), t: self.t }
    }
}

/// Evaluates the objective at `x` (a `[N, 1]` node), advances the moments and
/// returns `(features, gradient node, advanced moments)`.
pub fn tape_features(
    tape: &mut Tape,
    x: Var,
    at: Arc<ObjectiveAt>,
    slots: Arc<Vec<usize>>,
    moments: TapeMoments,
) -> Result<(Var, Var, TapeMoments)> {
    let g = tape.objective_gradient(x, at.clone());
    let split = tape.objective_split(x, at, slots, N_SLOTS)?;
    let m_old = tape.scale(moments.m, BETA1);
    let g_part = tape.scale(g, 1.0 - BETA1);
    let m = tape.add(m_old, g_part)?;
    let v_old = tape.scale(moments.v, BETA2);
    let g2 = tape.square(g);
    let g2_part = tape.scale(g2, 1.0 - BETA2);
    let v = tape.add(v_old, g2_part)?;
    let next = TapeMoments { m, v, t: moments.t + 1 };
    let (c1, c2) = MomentState { m: vec![], v: vec![], t: next.t }.bias_corrections();
    let v_hat = tape.scale(v, 1.0 / c2);
    let root = tape.sqrt(v_hat);
    let denom = tape.add_scalar(root, EPS);
    let m_hat = tape.scale(m, 1.0 / c1);
    let gn = tape.div_col(g, denom)?;
    let mn = tape.div_col(m_hat, denom)?;
    let sn = tape.div_col(split, denom)?;
    let features = tape.concat_cols(&[gn, mn, sn])?;
    Ok((features, g, next))
}
