//! Plan scoring against allowable dose intervals, and DVH metrics.
//!
//! A structure's penalty is the mean squared distance of its voxel doses to
//! the structure's allowable interval; its score is the negated penalty and
//! the plan score is the sum over scored structures. Targets use
//! `[Rx, 1.05·Rx_max]`; OARs use the clinical goal table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProblemError, Result};
use crate::problem::{ObjectiveKind, PlanProblem, StructureKind};

/// Shipped goal table (OAR-specific limits and allowable intervals).
pub const CLINICAL_GOALS_JSON: &str = include_str!("../data/clinical_goals.json");

/// Upper edge of the target interval relative to the largest prescription.
pub const TARGET_OVERDOSE_FACTOR: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseInterval {
    pub lo: f64,
    pub hi: f64,
}

impl DoseInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(ProblemError::Evaluation(format!("invalid dose interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// `[Rx, 1.05·Rx_max]` for a target.
    pub fn for_target(rx: f64, rx_max: f64) -> Result<Self> {
        Self::new(rx, TARGET_OVERDOSE_FACTOR * rx_max)
    }

    #[inline]
    pub fn squared_distance(&self, d: f64) -> f64 {
        let below = (self.lo - d).max(0.0);
        let above = (d - self.hi).max(0.0);
        below * below + above * above
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalGoal {
    pub name: String,
    pub kind: ObjectiveKind,
    pub d_clinic: f64,
    pub interval: [f64; 2],
}

impl ClinicalGoal {
    pub fn dose_interval(&self) -> DoseInterval {
        DoseInterval {
            lo: self.interval[0],
            hi: self.interval[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalGoalTable {
    pub version: String,
    pub goals: Vec<ClinicalGoal>,
}

impl ClinicalGoalTable {
    pub fn shipped() -> Self {
        Self::from_json(CLINICAL_GOALS_JSON).expect("shipped goal table parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        for g in &table.goals {
            DoseInterval::new(g.interval[0], g.interval[1])?;
            if g.kind == ObjectiveKind::DMin {
                return Err(ProblemError::Evaluation(format!("goal `{}` cannot be a Dmin goal", g.name)));
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Row index for a structure name. Exact (case-insensitive) match first,
    /// then the name with trailing `_suffix` segments removed one at a time,
    /// so `Parotid_L` and `Glnd_Submand_R` resolve to their base rows.
    pub fn lookup_index(&self, structure_name: &str) -> Option<usize> {
        let mut candidate = structure_name;
        loop {
            if let Some(i) = self.goals.iter().position(|g| g.name.eq_ignore_ascii_case(candidate)) {
                return Some(i);
            }
            match candidate.rfind('_') {
                Some(cut) if cut > 0 => candidate = &candidate[..cut],
                _ => return None,
            }
        }
    }

    pub fn lookup(&self, structure_name: &str) -> Option<&ClinicalGoal> {
        self.lookup_index(structure_name).map(|i| &self.goals[i])
    }
}

/// Mean squared distance of the doses to the interval.
pub fn structure_penalty(dose_values: &[f64], interval: DoseInterval) -> Result<f64> {
    if dose_values.is_empty() {
        return Err(ProblemError::Evaluation("empty structure".into()));
    }
    let total: f64 = dose_values.iter().map(|&d| interval.squared_distance(d)).sum();
    Ok(total / dose_values.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DvhMetric {
    /// Minimum dose to the hottest `p` percent of the volume, `p ∈ (0, 100]`.
    DosePercent(f64),
    /// Fraction of the volume receiving at least `d` Gy.
    VolumeAtDose(f64),
    Mean,
    /// Minimum dose to the hottest `cc` cubic centimetres.
    DoseAtVolumeCc { cc: f64, voxel_cc: f64 },
}

/// Evaluates a DVH metric. `D_p%` interpolates linearly between the sorted
/// (descending) voxel doses at position `q = p/100·n`, clamped to `[1, n]`.
pub fn dvh_metric(dose_values: &[f64], metric: DvhMetric) -> Result<f64> {
    let n = dose_values.len();
    if n == 0 {
        return Err(ProblemError::Evaluation("DVH of an empty structure".into()));
    }
    match metric {
        DvhMetric::Mean => Ok(dose_values.iter().sum::<f64>() / n as f64),
        DvhMetric::VolumeAtDose(d) => {
            Ok(dose_values.iter().filter(|&&v| v >= d).count() as f64 / n as f64)
        }
        DvhMetric::DosePercent(p) => {
            if !(p > 0.0 && p <= 100.0) {
                return Err(ProblemError::Evaluation(format!("D_p% requires p in (0, 100], got {p}")));
            }
            Ok(dose_at_position(dose_values, p / 100.0 * n as f64))
        }
        DvhMetric::DoseAtVolumeCc { cc, voxel_cc } => {
            if !(cc > 0.0 && voxel_cc > 0.0) {
                return Err(ProblemError::Evaluation(format!(
                    "D_cc requires positive volumes, got {cc} cc with {voxel_cc} cc voxels"
                )));
            }
            Ok(dose_at_position(dose_values, cc / voxel_cc))
        }
    }
}

/// Dose at (1-based, fractional) rank `q` of the descending order.
fn dose_at_position(values: &[f64], q: f64) -> f64 {
    let n = values.len();
    let q = q.clamp(1.0, n as f64);
    let lo_rank = q.floor() as usize;
    let hi_rank = q.ceil() as usize;
    // Descending rank r (1-based) sits at ascending index n - r.
    let mut buf = values.to_vec();
    let asc = n - hi_rank;
    let (_, pivot, right) = buf.select_nth_unstable_by(asc, f64::total_cmp);
    let at_hi = *pivot;
    let at_lo = if hi_rank == lo_rank {
        at_hi
    } else {
        right.iter().copied().fold(f64::INFINITY, f64::min)
    };
    at_lo + (q - lo_rank as f64) * (at_hi - at_lo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub dmean: f64,
    pub dmax: f64,
    pub d_0_03cc: f64,
    pub d99: f64,
    /// Fraction of a target receiving at least 99% of its prescription.
    pub v99: Option<f64>,
    /// Requested `V_x Gy` values keyed by dose level.
    pub v_gy: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub name: String,
    pub kind: StructureKind,
    pub interval: DoseInterval,
    pub penalty: f64,
    pub score: f64,
    pub metrics: StructureMetrics,
    /// Set when the OAR name was not in the goal table and the default
    /// interval was used.
    pub unknown_goal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub structures: Vec<StructureReport>,
    pub total_score: f64,
}

#[derive(Clone, Debug)]
pub struct ScoringOptions {
    pub default_oar_interval: DoseInterval,
    pub v_gy_levels: Vec<f64>,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            default_oar_interval: DoseInterval { lo: 0.0, hi: 20.0 },
            v_gy_levels: Vec::new(),
        }
    }
}

impl PlanReport {
    pub fn structure(&self, name: &str) -> Option<&StructureReport> {
        self.structures.iter().find(|s| s.name == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "structure", "kind", "interval_lo", "interval_hi", "penalty", "score", "dmean", "dmax",
            "d0.03cc", "d99", "v99", "unknown_goal",
        ])?;
        for s in &self.structures {
            let m = &s.metrics;
            w.write_record([
                s.name.clone(),
                format!("{:?}", s.kind).to_lowercase(),
                s.interval.lo.to_string(),
                s.interval.hi.to_string(),
                s.penalty.to_string(),
                s.score.to_string(),
                m.dmean.to_string(),
                m.dmax.to_string(),
                m.d_0_03cc.to_string(),
                m.d99.to_string(),
                m.v99.map(|v| v.to_string()).unwrap_or_default(),
                s.unknown_goal.to_string(),
            ])?;
        }
        w.write_record(["TOTAL", "", "", "", "", &self.total_score.to_string(), "", "", "", "", "", ""])?;
        let bytes = w.into_inner().map_err(|e| ProblemError::Evaluation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "plan score {:.4}", self.total_score);
        for s in &self.structures {
            let flag = if s.unknown_goal { " (default interval)" } else { "" };
            let _ = write!(
                out,
                "  {:<18} [{:>5.1}, {:>5.1}] score {:>10.4}  Dmean {:>6.2}  D0.03cc {:>6.2}  D99% {:>6.2}",
                s.name, s.interval.lo, s.interval.hi, s.score, s.metrics.dmean, s.metrics.d_0_03cc, s.metrics.d99
            );
            if let Some(v) = s.metrics.v99 {
                let _ = write!(out, "  V99% {:>6.2}%", 100.0 * v);
            }
            let _ = writeln!(out, "{flag}");
        }
        out
    }
}

/// Scores the plan `x`. Auxiliary structures are not scored.
pub fn plan_score(
    problem: &PlanProblem,
    x: &[f64],
    goals: &ClinicalGoalTable,
    options: &ScoringOptions,
) -> Result<PlanReport> {
    let dose = problem.dose(x)?;
    plan_score_from_dose(problem, &dose, goals, options)
}

pub fn plan_score_from_dose(
    problem: &PlanProblem,
    dose: &[f64],
    goals: &ClinicalGoalTable,
    options: &ScoringOptions,
) -> Result<PlanReport> {
    let rx_max = problem.rx_max();
    let mut structures = Vec::new();
    for s in &problem.structures {
        let (interval, rx, unknown_goal) = match s.kind {
            StructureKind::Auxiliary => continue,
            StructureKind::Target => {
                let rx = *problem.prescriptions.get(&s.name).ok_or_else(|| {
                    ProblemError::Evaluation(format!("target `{}` has no prescription", s.name))
                })?;
                (DoseInterval::for_target(rx, rx_max.unwrap_or(rx))?, Some(rx), false)
            }
            StructureKind::Oar => match goals.lookup(&s.name) {
                Some(g) => (g.dose_interval(), None, false),
                None => (options.default_oar_interval, None, true),
            },
        };
        let values: Vec<f64> = s.voxels.iter().map(|&v| dose[v as usize]).collect();
        let penalty = structure_penalty(&values, interval)?;
        let v_gy = options
            .v_gy_levels
            .iter()
            .map(|&d| Ok((format!("V{d}Gy"), dvh_metric(&values, DvhMetric::VolumeAtDose(d))?)))
            .collect::<Result<_>>()?;
        let metrics = StructureMetrics {
            dmean: dvh_metric(&values, DvhMetric::Mean)?,
            dmax: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            d_0_03cc: dvh_metric(
                &values,
                DvhMetric::DoseAtVolumeCc {
                    cc: 0.03,
                    voxel_cc: problem.voxel_volume_cc,
                },
            )?,
            d99: dvh_metric(&values, DvhMetric::DosePercent(99.0))?,
            v99: rx
                .map(|rx| dvh_metric(&values, DvhMetric::VolumeAtDose(0.99 * rx)))
                .transpose()?,
            v_gy,
        };
        structures.push(StructureReport {
            name: s.name.clone(),
            kind: s.kind,
            interval,
            penalty,
            score: -penalty,
            metrics,
            unknown_goal,
        });
    }
    let total_score = structures.iter().map(|s| s.score).sum();
    Ok(PlanReport {
        structures,
        total_score,
    })
}
