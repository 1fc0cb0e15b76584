//! Learned-optimizer driver.
//!
//! Iteration `t` (1-based) maps `X_{t-1}` to `X_t = X_{t-1} - x_ref·step`.
//! From iteration 51 on, `X_t` is clamped into the course MU box right after
//! the update. Moments advance once per iteration and are never rewound by
//! the clamp.

use std::sync::Arc;

use ndarray::Array2;
use pbs_core::problem::PlanProblem;
use pbs_core::trace::{Budget, RunTrace, Termination, TraceClock, TraceEntry};

use crate::error::Result;
use crate::features::{tape_features, MomentState, TapeMoments};
use crate::network::{BoundParams, L2ONetwork};
use crate::slots::assign_slots;
use crate::tape::{column, ObjectiveAt, Tape, Var};

/// Iterations after which the MU box is enforced.
pub const CLIP_AFTER: usize = 50;

#[derive(Clone, Debug)]
pub struct L2OState {
    pub x: Vec<f64>,
    pub moments: MomentState,
    pub prev_hidden: Option<Array2<f64>>,
    pub iteration: usize,
}

impl L2OState {
    pub fn new(x0: Vec<f64>) -> Self {
        let n = x0.len();
        Self { x: x0, moments: MomentState::new(n), prev_hidden: None, iteration: 0 }
    }
}

/// Clamp applied after the update of iteration `iteration`.
pub fn clip_after_update(x: &mut [f64], iteration: usize, bounds: (f64, f64)) {
    if iteration > CLIP_AFTER {
        for v in x {
            *v = v.clamp(bounds.0, bounds.1);
        }
    }
}

/// Scale that converts relative network steps into MU: the mean magnitude of
/// the start point, or the lower MU bound if that is zero.
pub fn reference_scale(problem: &PlanProblem, x0: &[f64]) -> f64 {
    let mean = x0.iter().map(|v| v.abs()).sum::<f64>() / x0.len().max(1) as f64;
    if mean > 0.0 { mean } else { problem.course_bounds().0.max(1.0) }
}

/// Problem-side constants shared by every step of a run.
pub struct RunContext {
    pub problem: Arc<PlanProblem>,
    pub slots: Arc<Vec<usize>>,
    pub positions: Arc<Vec<f64>>,
    pub bounds: (f64, f64),
    pub x_ref: f64,
}

impl RunContext {
    pub fn new(problem: Arc<PlanProblem>, x0: &[f64]) -> Result<Self> {
        let slots = Arc::new(assign_slots(&problem)?);
        let positions = Arc::new(problem.spot_positions().into_iter().map(|p| p as f64).collect());
        let bounds = problem.course_bounds();
        let x_ref = reference_scale(&problem, x0);
        Ok(Self { problem, slots, positions, bounds, x_ref })
    }
}

/// Nodes produced by one optimizer step on a tape.
pub struct TapeStep {
    pub x: Var,
    pub hidden: Var,
    pub moments: TapeMoments,
    /// Objective at the new iterate.
    pub at: Arc<ObjectiveAt>,
}

/// One learned step from `x` (whose objective is `at`) on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn tape_step(
    tape: &mut Tape,
    net: &L2ONetwork,
    params: &BoundParams,
    ctx: &RunContext,
    x: Var,
    at: Arc<ObjectiveAt>,
    moments: TapeMoments,
    prev_hidden: Option<Var>,
    iteration: usize,
) -> Result<TapeStep> {
    let (features, _, moments) = tape_features(tape, x, at, ctx.slots.clone(), moments)?;
    let (rel, hidden) = net.forward_tape(tape, params, features, prev_hidden, ctx.positions.clone())?;
    let step = tape.scale(rel, ctx.x_ref);
    let mut next = tape.sub(x, step)?;
    if iteration > CLIP_AFTER {
        next = tape.clamp_straight_through(next, ctx.bounds.0, ctx.bounds.1);
    }
    let x_new: Vec<f64> = tape.value(next).column(0).to_vec();
    let at = if x_new.iter().all(|v| v.is_finite()) {
        Arc::new(ObjectiveAt::new(ctx.problem.clone(), &x_new)?)
    } else {
        Arc::new(ObjectiveAt {
            problem: ctx.problem.clone(),
            eval: ctx.problem.evaluate_dose(&vec![f64::NAN; ctx.problem.n_voxels()]),
            gradient: vec![f64::NAN; x_new.len()],
        })
    };
    Ok(TapeStep { x: next, hidden, moments, at })
}

#[derive(Clone, Debug, Default)]
pub struct L2OOptions {
    pub record_x: bool,
}

/// Runs the learned optimizer from `x0` until the budget triggers.
pub fn l2o_minimize(
    problem: Arc<PlanProblem>,
    net: &L2ONetwork,
    x0: &[f64],
    budget: Budget,
    opts: &L2OOptions,
) -> Result<RunTrace> {
    problem.check_spot_vector(x0)?;
    net.check_spots(problem.n_spots())?;
    let ctx = RunContext::new(problem.clone(), x0)?;
    let mut clock = TraceClock::start();
    let mut state = L2OState::new(x0.to_vec());
    let mut at = Arc::new(ObjectiveAt::new(problem, x0)?);
    let mut entries = vec![TraceEntry {
        iter: 0,
        loss: at.eval.loss,
        seconds: clock.elapsed(),
        x: opts.record_x.then(|| state.x.clone()),
    }];
    if let Some(t) = budget.exhausted(0, 0.0, at.eval.loss) {
        return Ok(RunTrace { entries, termination: t, final_x: state.x });
    }
    let termination = loop {
        state.iteration += 1;
        let mut tape = Tape::new();
        let params = net.bind(&mut tape, false);
        let x = tape.constant(column(state.x.clone()));
        let moments = TapeMoments::from_state(&mut tape, &state.moments);
        let prev = state.prev_hidden.take().map(|h| tape.constant(h));
        let step = tape_step(&mut tape, net, &params, &ctx, x, at, moments, prev, state.iteration)?;
        let x_new: Vec<f64> = tape.value(step.x).column(0).to_vec();
        if x_new.iter().any(|v| !v.is_finite()) {
            break Termination::NonFinite(format!("step at iteration {}", state.iteration));
        }
        state.x = x_new;
        state.moments = step.moments.to_state(&tape);
        state.prev_hidden = Some(tape.value(step.hidden).clone());
        at = step.at;
        let seconds = clock.elapsed();
        entries.push(TraceEntry {
            iter: state.iteration,
            loss: at.eval.loss,
            seconds,
            x: opts.record_x.then(|| state.x.clone()),
        });
        if !at.eval.loss.is_finite() {
            break Termination::NonFinite(format!("loss at iteration {}", state.iteration));
        }
        if let Some(t) = budget.exhausted(state.iteration, seconds, at.eval.loss) {
            break t;
        }
    };
    Ok(RunTrace { entries, termination, final_x: state.x })
}
