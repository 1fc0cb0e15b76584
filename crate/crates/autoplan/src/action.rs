//! Multiplicative per-objective adjustments.

use serde::{Deserialize, Serialize};

use crate::error::{AutoplanError, Result};
use crate::init::ObjectiveParams;

pub const FACTOR_MIN: f64 = 0.5;
pub const FACTOR_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentAction {
    pub weight_factors: Vec<f64>,
    pub limit_factors: Vec<f64>,
}

fn check_factor(f: f64) -> Result<()> {
    if (FACTOR_MIN..=FACTOR_MAX).contains(&f) {
        Ok(())
    } else {
        Err(AutoplanError::Action(format!("factor {f} outside [{FACTOR_MIN}, {FACTOR_MAX}]")))
    }
}

impl AdjustmentAction {
    pub fn new(weight_factors: Vec<f64>, limit_factors: Vec<f64>) -> Result<Self> {
        if weight_factors.len() != limit_factors.len() {
            return Err(AutoplanError::Action(format!(
                "{} weight factors but {} limit factors",
                weight_factors.len(),
                limit_factors.len()
            )));
        }
        for &f in weight_factors.iter().chain(&limit_factors) {
            check_factor(f)?;
        }
        Ok(Self { weight_factors, limit_factors })
    }

    pub fn identity(n_objectives: usize) -> Self {
        Self { weight_factors: vec![1.0; n_objectives], limit_factors: vec![1.0; n_objectives] }
    }

    /// Factors `exp(a)` with each log-factor clamped into the allowed range.
    pub fn from_log_factors(log_weight: &[f64], log_limit: &[f64]) -> Result<Self> {
        let map = |v: &[f64]| -> Vec<f64> {
            v.iter().map(|a| a.clamp(FACTOR_MIN.ln(), FACTOR_MAX.ln()).exp().clamp(FACTOR_MIN, FACTOR_MAX)).collect()
        };
        Self::new(map(log_weight), map(log_limit))
    }

    pub fn len(&self) -> usize {
        self.weight_factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight_factors.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.weight_factors.iter().chain(&self.limit_factors).all(|&f| f == 1.0)
    }

    pub fn apply(&self, params: &ObjectiveParams) -> Result<ObjectiveParams> {
        if params.len() != self.len() {
            return Err(AutoplanError::Action(format!(
                "action covers {} objectives, plan has {}",
                self.len(),
                params.len()
            )));
        }
        Ok(params
            .iter()
            .zip(self.weight_factors.iter().zip(&self.limit_factors))
            .map(|(&(w, d), (fw, fd))| (w * fw, d * fd))
            .collect())
    }
}
