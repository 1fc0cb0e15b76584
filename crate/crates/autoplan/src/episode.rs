//! Planning episodes: optimize, score, adjust, repeat.

use std::sync::Arc;

use pbs_core::lbfgsb::{minimize, Bounds, LbfgsbOptions};
use pbs_core::plan_eval::{plan_score, ClinicalGoalTable, PlanReport, ScoringOptions};
use pbs_core::problem::{PlanProblem, StructureKind};
use pbs_core::trace::{Budget, RunTrace, Termination};
use pbs_l2o::{l2o_minimize, L2ONetwork, L2OOptions};
use serde::{Deserialize, Serialize};

use crate::action::AdjustmentAction;
use crate::error::Result;
use crate::init::ObjectiveParams;
use crate::rule::{rule_based_adjust, RuleConfig};

/// Rounds whose target V99 is within this many fractional points of the
/// best-coverage round are eligible for selection.
pub const COVERAGE_TOLERANCE: f64 = 0.005;

#[derive(Clone)]
pub enum InnerOptimizer {
    Lbfgsb,
    L2o(Arc<L2ONetwork>),
}

#[derive(Clone)]
pub struct InnerConfig {
    pub optimizer: InnerOptimizer,
    pub max_iters: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { optimizer: InnerOptimizer::Lbfgsb, max_iters: 200 }
    }
}

impl InnerConfig {
    /// Runs the inner optimizer on `problem` from `x0`.
    pub fn run(&self, problem: &PlanProblem, x0: &[f64]) -> Result<RunTrace> {
        let budget = Budget::iterations(self.max_iters);
        Ok(match &self.optimizer {
            InnerOptimizer::Lbfgsb => {
                let bounds = Bounds::for_problem(problem);
                let mut start = x0.to_vec();
                bounds.project(&mut start);
                minimize(problem, &start, &bounds, budget, &LbfgsbOptions::default())?
            }
            InnerOptimizer::L2o(net) => {
                l2o_minimize(Arc::new(problem.clone()), net, x0, budget, &L2OOptions::default())?
            }
        })
    }
}

/// What a policy sees between rounds.
pub struct PolicyInput<'a> {
    pub problem: &'a PlanProblem,
    pub report: &'a PlanReport,
    pub params: &'a ObjectiveParams,
    /// Round just completed (0-based).
    pub round: usize,
    pub adjustments: usize,
}

pub trait Policy {
    fn propose(&mut self, input: &PolicyInput<'_>) -> Result<AdjustmentAction>;
}

pub struct IdentityPolicy;

impl Policy for IdentityPolicy {
    fn propose(&mut self, input: &PolicyInput<'_>) -> Result<AdjustmentAction> {
        Ok(AdjustmentAction::identity(input.params.len()))
    }
}

#[derive(Clone, Default)]
pub struct RulePolicy(pub RuleConfig);

impl Policy for RulePolicy {
    fn propose(&mut self, input: &PolicyInput<'_>) -> Result<AdjustmentAction> {
        Ok(rule_based_adjust(input.problem, input.report, input.params, &self.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub params: ObjectiveParams,
    pub iterations: usize,
    pub final_loss: f64,
    pub seconds: f64,
    pub termination: String,
    pub failed: bool,
    pub report: PlanReport,
    pub score: f64,
    /// `score_r − score_{r−1}`; round 0 is measured against the start plan.
    pub reward: f64,
    /// Action applied after this round, absent for the last one.
    pub action: Option<AdjustmentAction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub start_score: f64,
    pub rounds: Vec<RoundRecord>,
    pub best_round: usize,
    pub best_x: Vec<f64>,
}

impl EpisodeRecord {
    pub fn best_score(&self) -> f64 {
        self.rounds[self.best_round].score
    }

    pub fn total_reward(&self) -> f64 {
        self.rounds.iter().map(|r| r.reward).sum()
    }
}

fn target_coverage(report: &PlanReport) -> Vec<f64> {
    report
        .structures
        .iter()
        .filter(|s| s.kind == StructureKind::Target)
        .map(|s| s.metrics.v99.unwrap_or(0.0))
        .collect()
}

/// Highest-scoring round among those whose every target V99 is within
/// `tolerance` of the best-coverage round (highest mean target V99). Ties
/// go to the earliest round.
pub fn select_best_round(reports: &[&PlanReport], tolerance: f64) -> usize {
    let cov: Vec<Vec<f64>> = reports.iter().map(|r| target_coverage(r)).collect();
    let mean = |c: &[f64]| if c.is_empty() { 0.0 } else { c.iter().sum::<f64>() / c.len() as f64 };
    let mut reference = 0;
    for r in 1..reports.len() {
        if mean(&cov[r]) > mean(&cov[reference]) {
            reference = r;
        }
    }
    let mut best = reference;
    for r in 0..reports.len() {
        let eligible = cov[r].iter().zip(&cov[reference]).all(|(c, b)| *c >= b - tolerance);
        let better = reports[r].total_score > reports[best].total_score
            || (reports[r].total_score == reports[best].total_score && r < best);
        if eligible && better {
            best = r;
        }
    }
    best
}

#[derive(Clone)]
pub struct EpisodeConfig {
    pub inner: InnerConfig,
    pub adjustments: usize,
    pub scoring: ScoringOptions,
    pub coverage_tolerance: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            inner: InnerConfig::default(),
            adjustments: 4,
            scoring: ScoringOptions::default(),
            coverage_tolerance: COVERAGE_TOLERANCE,
        }
    }
}

/// Runs `adjustments + 1` optimizations, each warm-started from the
/// previous round's plan. A round whose optimizer fails keeps the previous
/// plan.
pub fn run_episode(
    problem: &PlanProblem,
    params0: &ObjectiveParams,
    policy: &mut dyn Policy,
    goals: &ClinicalGoalTable,
    config: &EpisodeConfig,
    x_start: Option<&[f64]>,
) -> Result<EpisodeRecord> {
    let mut x = match x_start {
        Some(x) => {
            problem.check_spot_vector(x)?;
            x.to_vec()
        }
        None => problem.default_start(),
    };
    let start_score = plan_score(problem, &x, goals, &config.scoring)?.total_score;
    let mut prev = start_score;
    let mut params = params0.clone();
    let mut rounds: Vec<RoundRecord> = Vec::with_capacity(config.adjustments + 1);
    let mut plans = Vec::with_capacity(config.adjustments + 1);
    for round in 0..=config.adjustments {
        let instance = problem.with_objective_parameters(&params)?;
        let outcome = config.inner.run(&instance, &x);
        let (iterations, final_loss, seconds, termination, failed) = match outcome {
            Ok(trace) if !matches!(trace.termination, Termination::NonFinite(_))
                && trace.final_x.iter().all(|v| v.is_finite()) =>
            {
                x = trace.final_x.clone();
                (trace.iterations(), trace.final_loss(), trace.seconds(), format!("{:?}", trace.termination), false)
            }
            Ok(trace) => (trace.iterations(), f64::NAN, trace.seconds(), format!("{:?}", trace.termination), true),
            Err(e) => (0, f64::NAN, 0.0, e.to_string(), true),
        };
        let report = plan_score(problem, &x, goals, &config.scoring)?;
        let score = report.total_score;
        let action = if round < config.adjustments {
            let a = policy.propose(&PolicyInput {
                problem: &instance,
                report: &report,
                params: &params,
                round,
                adjustments: config.adjustments,
            })?;
            Some(a)
        } else {
            None
        };
        rounds.push(RoundRecord {
            round,
            params: params.clone(),
            iterations,
            final_loss,
            seconds,
            termination,
            failed,
            report,
            score,
            reward: score - prev,
            action: action.clone(),
        });
        plans.push(x.clone());
        prev = score;
        if let Some(a) = action {
            params = a.apply(&params)?;
        }
    }
    let reports: Vec<&PlanReport> = rounds.iter().map(|r| &r.report).collect();
    let best_round = select_best_round(&reports, config.coverage_tolerance);
    Ok(EpisodeRecord { start_score, best_x: plans.swap_remove(best_round), rounds, best_round })
}
