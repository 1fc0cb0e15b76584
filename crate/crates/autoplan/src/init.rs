//! Initial objective parameters.
//!
//! OAR limits start at `min(D_predict, D_clinic)`; target objectives follow
//! the interval rule (`Dmin` at Rx, `Dmax` at 1.05·Rx_max); all weights 1.

use std::collections::BTreeMap;

use pbs_core::lbfgsb::{minimize, Bounds, LbfgsbOptions};
use pbs_core::plan_eval::{dvh_metric, ClinicalGoalTable, DvhMetric, TARGET_OVERDOSE_FACTOR};
use pbs_core::problem::{ObjectiveKind, PlanProblem, StructureKind};
use pbs_core::trace::Budget;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutoplanError, Result};

/// `(weight, dose limit)` per objective, in problem order.
pub type ObjectiveParams = Vec<(f64, f64)>;

pub fn current_params(problem: &PlanProblem) -> ObjectiveParams {
    problem.objectives.iter().map(|o| (o.weight, o.dose_limit)).collect()
}

/// Initial parameters. `d_predict` maps structure names to predicted
/// achievable doses in Gy; structures absent from it use `D_clinic`.
pub fn init_objectives(
    problem: &PlanProblem,
    d_predict: &BTreeMap<String, f64>,
    goals: &ClinicalGoalTable,
) -> Result<ObjectiveParams> {
    if let Some((name, d)) = d_predict.iter().find(|(_, d)| !(**d >= 0.0)) {
        return Err(AutoplanError::Config(format!("predicted dose for `{name}` must be non-negative, got {d}")));
    }
    let rx_max = problem.rx_max();
    problem
        .objectives
        .iter()
        .map(|o| {
            let s = &problem.structures[o.structure];
            let limit = match s.kind {
                StructureKind::Target => {
                    let rx = *problem.prescriptions.get(&s.name).ok_or_else(|| {
                        AutoplanError::Config(format!("target `{}` has no prescription", s.name))
                    })?;
                    match o.kind {
                        ObjectiveKind::DMin => rx,
                        _ => TARGET_OVERDOSE_FACTOR * rx_max.unwrap_or(rx),
                    }
                }
                StructureKind::Oar => {
                    let clinic = goals
                        .lookup(&s.name)
                        .ok_or_else(|| AutoplanError::Config(format!("OAR `{}` has no clinical goal", s.name)))?
                        .d_clinic;
                    d_predict.get(&s.name).map_or(clinic, |&p| p.min(clinic))
                }
                StructureKind::Auxiliary => o.dose_limit,
            };
            Ok((1.0, limit))
        })
        .collect()
}

/// Stand-in dose predictor: runs L-BFGS-B for `iterations` on the problem
/// and reports each OAR's achieved dose (mean for mean-dose goals, near-max
/// otherwise), scaled by a seeded factor in `[1 - spread, 1 + spread]`.
pub fn scripted_d_predict(
    problem: &PlanProblem,
    goals: &ClinicalGoalTable,
    iterations: usize,
    spread: f64,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let x0 = problem.default_start();
    let trace = minimize(problem, &x0, &Bounds::for_problem(problem), Budget::iterations(iterations), &LbfgsbOptions::default())?;
    let dose = problem.dose(&trace.final_x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for s in problem.structures.iter().filter(|s| s.kind == StructureKind::Oar) {
        let Some(goal) = goals.lookup(&s.name) else { continue };
        let values: Vec<f64> = s.voxels.iter().map(|&v| dose[v as usize]).collect();
        let metric = match goal.kind {
            ObjectiveKind::DMean => DvhMetric::Mean,
            _ => DvhMetric::DoseAtVolumeCc { cc: 0.03, voxel_cc: problem.voxel_volume_cc },
        };
        let achieved = dvh_metric(&values, metric)?;
        let factor = if spread > 0.0 { rng.random_range(1.0 - spread..=1.0 + spread) } else { 1.0 };
        out.insert(s.name.clone(), (achieved * factor).max(0.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pbs_core::matrix::DoseInfluenceMatrix;
    use pbs_core::problem::{ObjectiveComponent, Structure};

    fn problem() -> PlanProblem {
        let m = DoseInfluenceMatrix::from_dense(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let structures = vec![
            Structure::new("CTV", StructureKind::Target, vec![0]),
            Structure::new("SpinalCord", StructureKind::Oar, vec![1]),
            Structure::new("Parotid_L", StructureKind::Oar, vec![2]),
        ];
        let obj = |structure, kind| ObjectiveComponent { structure, kind, weight: 3.0, dose_limit: 1.0 };
        let objectives = vec![
            obj(0, ObjectiveKind::DMin),
            obj(0, ObjectiveKind::DMax),
            obj(1, ObjectiveKind::DMax),
            obj(2, ObjectiveKind::DMean),
        ];
        PlanProblem::new(m, structures, objectives, 30).unwrap().with_prescription("CTV", 70.0).unwrap()
    }

    #[test]
    fn minimum_rule() {
        let goals = ClinicalGoalTable::shipped();
        let p = problem();
        let pred = BTreeMap::from([("SpinalCord".to_string(), 25.0), ("Parotid_L".to_string(), 60.0)]);
        let params = init_objectives(&p, &pred, &goals).unwrap();
        assert_eq!(params, vec![(1.0, 70.0), (1.0, 73.5), (1.0, 25.0), (1.0, 30.0)]);
        let same = BTreeMap::from([("SpinalCord".to_string(), 45.0)]);
        assert_eq!(init_objectives(&p, &same, &goals).unwrap()[2], (1.0, 45.0));
        // Missing prediction falls back to the clinical goal.
        assert_eq!(init_objectives(&p, &BTreeMap::new(), &goals).unwrap()[2], (1.0, 45.0));
    }

    #[test]
    fn negative_prediction_rejected() {
        let pred = BTreeMap::from([("SpinalCord".to_string(), -1.0)]);
        assert!(init_objectives(&problem(), &pred, &ClinicalGoalTable::shipped()).is_err());
    }
}
