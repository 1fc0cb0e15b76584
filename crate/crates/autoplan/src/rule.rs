//! Rule-based planner policy.
//!
//! Only structures with a negative score are touched. Objectives on the
//! worst OARs (penalty at least `worst_fraction` of the largest OAR penalty)
//! and on violated targets get their weight raised by `weight_step` up to
//! `weight_cap`. Dose limits move by at most `limit_step` toward the scoring
//! interval: upper-type limits above the interval's upper bound are lowered,
//! and a target `Dmin` limit below the interval's lower bound is raised, so
//! it never ends below Rx.

use pbs_core::plan_eval::PlanReport;
use pbs_core::problem::{ObjectiveKind, PlanProblem, StructureKind};
use serde::{Deserialize, Serialize};

use crate::action::AdjustmentAction;
use crate::init::ObjectiveParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub weight_step: f64,
    pub weight_cap: f64,
    pub limit_step: f64,
    pub worst_fraction: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self { weight_step: 1.5, weight_cap: 20.0, limit_step: 0.1, worst_fraction: 0.5 }
    }
}

pub fn rule_based_adjust(
    problem: &PlanProblem,
    report: &PlanReport,
    params: &ObjectiveParams,
    config: &RuleConfig,
) -> AdjustmentAction {
    let mut action = AdjustmentAction::identity(params.len());
    let worst_oar = report
        .structures
        .iter()
        .filter(|s| s.kind == StructureKind::Oar)
        .map(|s| s.penalty)
        .fold(0.0, f64::max);
    for (k, (o, &(w, d))) in problem.objectives.iter().zip(params).enumerate() {
        let name = &problem.structures[o.structure].name;
        let Some(sr) = report.structure(name) else { continue };
        if !(sr.score < 0.0) {
            continue;
        }
        let (lo, hi) = (sr.interval.lo, sr.interval.hi);
        let raise_weight = match sr.kind {
            StructureKind::Oar => sr.penalty >= config.worst_fraction * worst_oar,
            StructureKind::Target => {
                let over = sr.metrics.dmax > hi;
                let under = sr.metrics.d99 < lo || !over;
                match o.kind {
                    ObjectiveKind::DMin => under,
                    _ => over,
                }
            }
            StructureKind::Auxiliary => false,
        };
        if raise_weight && w > 0.0 {
            action.weight_factors[k] = config.weight_step.min((config.weight_cap / w).max(1.0));
        }
        let limit_factor = match o.kind {
            ObjectiveKind::DMin if d > 0.0 && d < lo => (1.0 + config.limit_step).min(lo / d),
            ObjectiveKind::DMin if d <= 0.0 => 1.0,
            ObjectiveKind::DMax | ObjectiveKind::DMean if d > hi => (1.0 - config.limit_step).max(hi / d),
            _ => 1.0,
        };
        action.limit_factors[k] = limit_factor;
    }
    action
}
