//! The planning problem: structures, weighted one-sided penalty objectives
//! and the spot-MU box, together with the objective, its gradient, the
//! per-component split gradients and Hessian-vector products.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, ProblemError, Result};
use crate::matrix::DoseInfluenceMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Target,
    Oar,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    pub kind: StructureKind,
    pub voxels: Vec<u32>,
}

impl Structure {
    pub fn new(name: impl Into<String>, kind: StructureKind, voxels: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            kind,
            voxels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    DMax,
    DMin,
    DMean,
}

/// One weighted penalty term. `structure` indexes `PlanProblem::structures`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveComponent {
    pub structure: usize,
    pub kind: ObjectiveKind,
    pub weight: f64,
    pub dose_limit: f64,
}

/// Beam-geometry metadata for one spot, used to give spots a stable order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotInfo {
    pub beam: u32,
    pub layer: u32,
    pub row: i32,
    pub col: i32,
    pub energy_mev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanProblem {
    pub matrix: Arc<DoseInfluenceMatrix>,
    pub structures: Vec<Structure>,
    pub objectives: Vec<ObjectiveComponent>,
    pub fractions: u32,
    /// Per-fraction MU box; the course-level box is this times `fractions`.
    pub mu_bounds_per_fraction: (f64, f64),
    /// Target structure name -> prescription (Gy).
    pub prescriptions: BTreeMap<String, f64>,
    /// Either empty or one entry per spot.
    pub spots: Vec<SpotInfo>,
    pub voxel_volume_cc: f64,
}

pub const DEFAULT_MU_BOUNDS: (f64, f64) = (3.0, 300.0);
pub const DEFAULT_VOXEL_VOLUME_CC: f64 = 0.008;

/// Everything computed from one dose evaluation. Reused by gradients,
/// split gradients and Hessian-vector products.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub component_losses: Vec<f64>,
    /// `∂loss_k/∂dose` at each voxel of the component's structure.
    pub coefficients: Vec<Vec<f64>>,
    /// Second derivative of the component in dose space: per voxel for
    /// Dmax/Dmin terms, a single scalar for Dmean terms.
    pub curvature: Vec<Vec<f64>>,
}

impl PlanProblem {
    pub fn new(
        matrix: DoseInfluenceMatrix,
        structures: Vec<Structure>,
        objectives: Vec<ObjectiveComponent>,
        fractions: u32,
    ) -> Result<Self> {
        let problem = Self {
            matrix: Arc::new(matrix),
            structures,
            objectives,
            fractions,
            mu_bounds_per_fraction: DEFAULT_MU_BOUNDS,
            prescriptions: BTreeMap::new(),
            spots: Vec::new(),
            voxel_volume_cc: DEFAULT_VOXEL_VOLUME_CC,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_prescription(mut self, target: impl Into<String>, rx: f64) -> Result<Self> {
        self.prescriptions.insert(target.into(), rx);
        self.validate()?;
        Ok(self)
    }

    pub fn n_spots(&self) -> usize {
        self.matrix.n_spots()
    }

    pub fn n_voxels(&self) -> usize {
        self.matrix.n_voxels()
    }

    pub fn n_objectives(&self) -> usize {
        self.objectives.len()
    }

    pub fn structure_index(&self, name: &str) -> Option<usize> {
        self.structures.iter().position(|s| s.name == name)
    }

    /// Largest prescription over all targets.
    pub fn rx_max(&self) -> Option<f64> {
        self.prescriptions.values().copied().reduce(f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let n_voxels = self.n_voxels();
        for s in &self.structures {
            if s.voxels.is_empty() {
                return Err(ProblemError::InvalidStructure {
                    name: s.name.clone(),
                    reason: "no voxels".into(),
                });
            }
            if let Some(v) = s.voxels.iter().find(|&&v| v as usize >= n_voxels) {
                return Err(ProblemError::InvalidStructure {
                    name: s.name.clone(),
                    reason: format!("voxel {v} outside grid of {n_voxels}"),
                });
            }
            let unique: HashSet<u32> = s.voxels.iter().copied().collect();
            if unique.len() != s.voxels.len() {
                return Err(ProblemError::InvalidStructure {
                    name: s.name.clone(),
                    reason: "duplicate voxel ids".into(),
                });
            }
        }
        let names: HashSet<&str> = self.structures.iter().map(|s| s.name.as_str()).collect();
        if names.len() != self.structures.len() {
            return Err(ProblemError::InvalidProblem("structure names must be unique".into()));
        }
        if self.objectives.is_empty() {
            return Err(ProblemError::InvalidProblem("at least one objective is required".into()));
        }
        for (index, o) in self.objectives.iter().enumerate() {
            let reason = if o.structure >= self.structures.len() {
                Some(format!("structure index {} out of range", o.structure))
            } else if !(o.weight.is_finite() && o.weight >= 0.0) {
                Some(format!("weight {} must be finite and >= 0", o.weight))
            } else if !(o.dose_limit.is_finite() && o.dose_limit >= 0.0) {
                Some(format!("dose limit {} must be finite and >= 0", o.dose_limit))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(ProblemError::InvalidObjective { index, reason });
            }
        }
        if self.fractions == 0 {
            return Err(ProblemError::InvalidProblem("fractions must be >= 1".into()));
        }
        let (lo, hi) = self.mu_bounds_per_fraction;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(ProblemError::InvalidProblem(format!("bad MU bounds [{lo}, {hi}]")));
        }
        for (name, rx) in &self.prescriptions {
            match self.structure_index(name) {
                Some(i) if self.structures[i].kind == StructureKind::Target => {}
                _ => {
                    return Err(ProblemError::InvalidProblem(format!(
                        "prescription for `{name}` does not name a target"
                    )))
                }
            }
            if !(rx.is_finite() && *rx > 0.0) {
                return Err(ProblemError::InvalidProblem(format!("prescription {rx} for `{name}`")));
            }
        }
        if !self.spots.is_empty() && self.spots.len() != self.n_spots() {
            return Err(ProblemError::DimensionMismatch {
                what: "spot metadata",
                expected: self.n_spots(),
                got: self.spots.len(),
            });
        }
        Ok(())
    }

    /// Course-level MU box `[lo·Fx, hi·Fx]`.
    pub fn course_bounds(&self) -> (f64, f64) {
        let fx = self.fractions as f64;
        (self.mu_bounds_per_fraction.0 * fx, self.mu_bounds_per_fraction.1 * fx)
    }

    pub fn check_spot_vector(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_spots() {
            return Err(ProblemError::DimensionMismatch {
                what: "spot vector",
                expected: self.n_spots(),
                got: x.len(),
            });
        }
        check_finite("spot vector", x)
    }

    /// Voxel dose `M·x` in Gy.
    pub fn dose(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_spot_vector(x)?;
        self.matrix.matvec(x)
    }

    /// Dose with every spot at 1 MU.
    pub fn unit_mu_dose(&self) -> Vec<f64> {
        self.matrix.row_sums()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let dose = self.dose(x)?;
        Ok(self.evaluate_dose(&dose))
    }

    /// Evaluates every component from a precomputed voxel dose.
    pub fn evaluate_dose(&self, dose: &[f64]) -> Evaluation {
        let k = self.objectives.len();
        let mut component_losses = Vec::with_capacity(k);
        let mut coefficients = Vec::with_capacity(k);
        let mut curvature = Vec::with_capacity(k);
        for o in &self.objectives {
            let voxels = &self.structures[o.structure].voxels;
            let n = voxels.len() as f64;
            let (loss, coef, curv) = match o.kind {
                ObjectiveKind::DMax | ObjectiveKind::DMin => {
                    let mut loss = 0.0;
                    let mut coef = Vec::with_capacity(voxels.len());
                    let mut curv = Vec::with_capacity(voxels.len());
                    for &v in voxels {
                        let diff = dose[v as usize] - o.dose_limit;
                        let r = match o.kind {
                            ObjectiveKind::DMax => diff.max(0.0),
                            _ => diff.min(0.0),
                        };
                        loss += r * r;
                        coef.push(2.0 * o.weight * r / n);
                        curv.push(if r != 0.0 { 2.0 * o.weight / n } else { 0.0 });
                    }
                    (o.weight * loss / n, coef, curv)
                }
                ObjectiveKind::DMean => {
                    let mean = voxels.iter().map(|&v| dose[v as usize]).sum::<f64>() / n;
                    let r = (mean - o.dose_limit).max(0.0);
                    let c = 2.0 * o.weight * r / n;
                    let h = if r > 0.0 { 2.0 * o.weight / (n * n) } else { 0.0 };
                    (o.weight * r * r, vec![c; voxels.len()], vec![h])
                }
            };
            component_losses.push(loss);
            coefficients.push(coef);
            curvature.push(curv);
        }
        Evaluation {
            loss: component_losses.iter().sum(),
            component_losses,
            coefficients,
            curvature,
        }
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x)?.loss)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(x)?.1)
    }

    pub fn loss_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let eval = self.evaluate(x)?;
        Ok((eval.loss, self.gradient_from(&eval)))
    }

    pub fn gradient_from(&self, eval: &Evaluation) -> Vec<f64> {
        let mut g = vec![0.0; self.n_spots()];
        for (o, coef) in self.objectives.iter().zip(&eval.coefficients) {
            let voxels = &self.structures[o.structure].voxels;
            self.matrix.accumulate_transpose_rows(voxels, coef, &mut g);
        }
        g
    }

    /// Column `k` is the gradient of the `k`-th weighted component alone.
    pub fn split_gradients(&self, x: &[f64]) -> Result<Array2<f64>> {
        let eval = self.evaluate(x)?;
        Ok(self.split_gradients_from(&eval))
    }

    pub fn split_gradients_from(&self, eval: &Evaluation) -> Array2<f64> {
        let n = self.n_spots();
        let mut out = Array2::zeros((n, self.objectives.len()));
        let mut col = vec![0.0; n];
        for (k, (o, coef)) in self.objectives.iter().zip(&eval.coefficients).enumerate() {
            col.iter_mut().for_each(|c| *c = 0.0);
            let voxels = &self.structures[o.structure].voxels;
            self.matrix.accumulate_transpose_rows(voxels, coef, &mut col);
            out.column_mut(k).iter_mut().zip(&col).for_each(|(d, s)| *d = *s);
        }
        out
    }

    /// `∇²loss_k · u` for component `k` at the point `eval` was computed.
    /// The one-sided penalties are treated with their a.e. second
    /// derivative (zero at the kink).
    pub fn component_hessian_vector(&self, eval: &Evaluation, k: usize, u: &[f64]) -> Vec<f64> {
        let o = &self.objectives[k];
        let voxels = &self.structures[o.structure].voxels;
        let curv = &eval.curvature[k];
        let mut out = vec![0.0; self.n_spots()];
        if curv.iter().all(|&h| h == 0.0) {
            return out;
        }
        match o.kind {
            ObjectiveKind::DMax | ObjectiveKind::DMin => {
                let coef: Vec<f64> = voxels
                    .iter()
                    .zip(curv)
                    .map(|(&v, &h)| if h != 0.0 { h * self.matrix.row_dot(v as usize, u) } else { 0.0 })
                    .collect();
                self.matrix.accumulate_transpose_rows(voxels, &coef, &mut out);
            }
            ObjectiveKind::DMean => {
                let s: f64 = voxels.iter().map(|&v| self.matrix.row_dot(v as usize, u)).sum();
                let coef = vec![curv[0] * s; voxels.len()];
                self.matrix.accumulate_transpose_rows(voxels, &coef, &mut out);
            }
        }
        out
    }

    /// Uniform start `α·1` where α is the least-squares scalar matching the
    /// unit-MU target dose to each target's prescription, clamped into the
    /// course MU box.
    pub fn default_start(&self) -> Vec<f64> {
        let unit = self.unit_mu_dose();
        let (mut num, mut den) = (0.0, 0.0);
        for (name, &rx) in &self.prescriptions {
            if let Some(i) = self.structure_index(name) {
                for &v in &self.structures[i].voxels {
                    let u = unit[v as usize];
                    num += u * rx;
                    den += u * u;
                }
            }
        }
        let (lo, hi) = self.course_bounds();
        let alpha = if den > 0.0 { (num / den).clamp(lo, hi) } else { lo };
        vec![alpha; self.n_spots()]
    }

    /// Spot ranks under the (beam, layer, row, col) ordering; identity when
    /// no spot metadata is attached.
    pub fn spot_positions(&self) -> Vec<usize> {
        let n = self.n_spots();
        if self.spots.is_empty() {
            return (0..n).collect();
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| {
            let s = &self.spots[i];
            (s.beam, s.layer, s.row, s.col, i)
        });
        let mut ranks = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            ranks[i] = rank;
        }
        ranks
    }

    /// Same problem with objective weights and limits replaced.
    pub fn with_objective_parameters(&self, params: &[(f64, f64)]) -> Result<Self> {
        if params.len() != self.objectives.len() {
            return Err(ProblemError::DimensionMismatch {
                what: "objective parameters",
                expected: self.objectives.len(),
                got: params.len(),
            });
        }
        let mut out = self.clone();
        for (o, &(w, d)) in out.objectives.iter_mut().zip(params) {
            o.weight = w;
            o.dose_limit = d;
        }
        out.validate()?;
        Ok(out)
    }
}
