//! Unrolled meta-training of the learned optimizer.
//!
//! Each epoch restarts every problem from its default start and rolls the
//! optimizer forward for `rollout_steps` iterations, split into windows of
//! `window` steps. After a window the weighted loss
//!
//! ```text
//! L = mean over batch of Σ_t w_t·f(X_t),   w_t = min(1, n_step / (20·(n_epoch/10)²))
//! ```
//!
//! is differentiated through the whole window (including the Hessian terms
//! of the gradient inputs) and one AdamW update is applied. Iterates,
//! moments and hidden states carry into the next window as constants.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use pbs_core::problem::PlanProblem;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adamw::{clip_global_norm, cosine_lr, AdamW, AdamWConfig};
use crate::checkpoint;
use crate::error::{L2oError, Result};
use crate::features::TapeMoments;
use crate::network::{L2OConfig, L2ONetwork};
use crate::optimizer::{tape_step, L2OState, RunContext};
use crate::tape::{column, ObjectiveAt, Tape, Var};

/// Eq.-4 weight. `n_epoch / 10` is taken in real arithmetic.
pub fn weight_schedule(n_step: usize, n_epoch: usize) -> Result<f64> {
    if n_step == 0 || n_epoch == 0 {
        return Err(L2oError::Config(format!("weight schedule needs positive inputs, got n_step={n_step}, n_epoch={n_epoch}")));
    }
    let e = n_epoch as f64 / 10.0;
    Ok((n_step as f64 / (20.0 * e * e)).min(1.0))
}

/// Per-window record of the weighted loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLossRecord {
    pub n_epoch: usize,
    pub n_steps: Vec<usize>,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    pub value: f64,
}

/// `Σ w_t·f(X_t)` for a window whose first entry is step `first_step` of
/// epoch `n_epoch`.
pub fn meta_loss(window: &[f64], first_step: usize, n_epoch: usize) -> Result<MetaLossRecord> {
    if window.is_empty() {
        return Err(L2oError::Config("empty meta-loss window".into()));
    }
    let n_steps: Vec<usize> = (first_step..first_step + window.len()).collect();
    let weights = n_steps.iter().map(|&s| weight_schedule(s, n_epoch)).collect::<Result<Vec<_>>>()?;
    let value = weights.iter().zip(window).map(|(w, f)| w * f).sum();
    Ok(MetaLossRecord { n_epoch, n_steps, weights, losses: window.to_vec(), value })
}

/// Batch average of window meta-losses.
pub fn batch_meta_loss(records: &[MetaLossRecord]) -> f64 {
    records.iter().map(|r| r.value).sum::<f64>() / records.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub network: L2OConfig,
    /// Inner steps per outer update.
    pub window: usize,
    pub epochs: usize,
    /// Inner iterations per problem per epoch.
    pub rollout_steps: usize,
    /// Problems per outer update.
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Outer steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Stops training once this much wall time has elapsed.
    pub max_seconds: Option<f64>,
    /// Divides each problem's window loss by its loss at the start point.
    pub normalize_by_initial_loss: bool,
    /// Non-finite windows tolerated before aborting.
    pub max_bad_windows: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            network: L2OConfig::default(),
            window: 20,
            epochs: 30,
            rollout_steps: 100,
            batch: 1,
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            max_seconds: None,
            normalize_by_initial_loss: false,
            max_bad_windows: 5,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.epochs == 0 || self.rollout_steps == 0 || self.batch == 0 {
            return Err(L2oError::Config("window, epochs, rollout_steps and batch must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(L2oError::Config("learning rate must be positive".into()));
        }
        self.network.validate()
    }

    pub fn windows_per_rollout(&self) -> usize {
        self.rollout_steps.div_ceil(self.window)
    }

    pub fn total_outer_steps(&self, n_problems: usize) -> usize {
        self.epochs * n_problems.div_ceil(self.batch) * self.windows_per_rollout()
    }
}

/// One problem's rollout position between windows.
#[derive(Clone)]
pub struct Rollout {
    pub ctx: Arc<RunContext>,
    pub state: L2OState,
    pub at: Arc<ObjectiveAt>,
    pub initial_loss: f64,
}

impl Rollout {
    pub fn start(problem: Arc<PlanProblem>) -> Result<Self> {
        let x0 = problem.default_start();
        Self::start_at(problem, x0)
    }

    pub fn start_at(problem: Arc<PlanProblem>, x0: Vec<f64>) -> Result<Self> {
        let ctx = Arc::new(RunContext::new(problem.clone(), &x0)?);
        let at = Arc::new(ObjectiveAt::new(problem, &x0)?);
        let initial_loss = at.eval.loss;
        Ok(Self { ctx, state: L2OState::new(x0), at, initial_loss })
    }
}

pub struct WindowResult {
    pub record: MetaLossRecord,
    /// Loss actually differentiated (after optional normalisation).
    pub objective: f64,
    /// Parameter gradients, in network order; absent unless requested.
    pub grads: Option<Vec<Array2<f64>>>,
    pub end: Rollout,
    pub finite: bool,
}

/// Runs `steps` learned iterations from `rollout`, returning the weighted
/// loss and, if `with_grad`, its gradient with respect to every parameter.
pub fn run_window(
    net: &L2ONetwork,
    rollout: &Rollout,
    steps: usize,
    n_epoch: usize,
    normalize: bool,
    with_grad: bool,
) -> Result<WindowResult> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, with_grad);
    let st = &rollout.state;
    let mut x = tape.constant(column(st.x.clone()));
    let mut moments = TapeMoments::from_state(&mut tape, &st.moments);
    let mut prev: Option<Var> = st.prev_hidden.as_ref().map(|h| tape.constant(h.clone()));
    let mut at = rollout.at.clone();
    let scale = if normalize && rollout.initial_loss > 0.0 { 1.0 / rollout.initial_loss } else { 1.0 };
    let mut total: Option<Var> = None;
    let mut losses = Vec::with_capacity(steps);
    let mut finite = true;
    for s in 0..steps {
        let iteration = st.iteration + s + 1;
        let step = tape_step(&mut tape, net, &params, &rollout.ctx, x, at, moments, prev, iteration)?;
        let f = tape.objective_loss(step.x, step.at.clone());
        let w = weight_schedule(iteration, n_epoch)?;
        let term = tape.scale(f, w * scale);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        losses.push(step.at.eval.loss);
        x = step.x;
        moments = step.moments;
        prev = Some(step.hidden);
        at = step.at;
        if !at.eval.loss.is_finite() {
            finite = false;
            break;
        }
    }
    let total = total.ok_or_else(|| L2oError::Config("window of zero steps".into()))?;
    let record = meta_loss(&losses, st.iteration + 1, n_epoch)?;
    let objective = tape.scalar(total);
    finite &= objective.is_finite();
    let grads = if with_grad && finite {
        let mut g = tape.backward(total)?;
        let grads: Vec<Array2<f64>> = params
            .vars
            .iter()
            .zip(&net.params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Array2::zeros(p.raw_dim())))
            .collect();
        finite &= grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        Some(grads)
    } else {
        None
    };
    let end = Rollout {
        ctx: rollout.ctx.clone(),
        state: L2OState {
            x: tape.value(x).column(0).to_vec(),
            moments: moments.to_state(&tape),
            prev_hidden: prev.map(|h| tape.value(h).clone()),
            iteration: st.iteration + losses.len(),
        },
        at,
        initial_loss: rollout.initial_loss,
    };
    Ok(WindowResult { record, objective, grads, end, finite })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub outer_step: usize,
    pub meta_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub fn write_training_log(rows: &[TrainLogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_log(path: impl AsRef<Path>) -> Result<Vec<TrainLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub struct TrainOutcome {
    pub net: L2ONetwork,
    pub log: Vec<TrainLogRow>,
    pub skipped_windows: usize,
    pub completed: bool,
}

pub const CHECKPOINT_FILE: &str = "l2o.ckpt";
pub const LOG_FILE: &str = "training_log.csv";

/// Meta-trains `net` (or a fresh network from `config.network`) on
/// `problems`. With `out_dir`, checkpoints and the training log are written
/// there.
pub fn train(
    config: &MetaConfig,
    problems: &[Arc<PlanProblem>],
    net: Option<L2ONetwork>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if problems.is_empty() {
        return Err(L2oError::Config("no training problems".into()));
    }
    let mut net = match net {
        Some(n) => n,
        None => L2ONetwork::new(config.network.clone())?,
    };
    for p in problems {
        net.check_spots(p.n_spots())?;
        crate::slots::assign_slots(p)?;
    }
    let decay_mask: Vec<bool> = net.params.iter().map(|p| p.nrows() > 1 && p.ncols() > 1).collect();
    let mut opt = AdamW::new(config.optimizer.clone(), &net.params);
    let total = config.total_outer_steps(problems.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let clock = Instant::now();
    let mut log = Vec::new();
    let mut bad = 0;
    let mut outer = 0;
    let ckpt_path: Option<PathBuf> = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut completed = true;
    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..problems.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let mut rollouts: Vec<Rollout> =
                chunk.iter().map(|&i| Rollout::start(problems[i].clone())).collect::<Result<_>>()?;
            let mut done = 0;
            while done < config.rollout_steps {
                if config.max_seconds.is_some_and(|s| clock.elapsed().as_secs_f64() >= s) {
                    completed = false;
                    break 'epochs;
                }
                let steps = config.window.min(config.rollout_steps - done);
                let results: Vec<Result<WindowResult>> = rollouts
                    .par_iter()
                    .map(|r| run_window(&net, r, steps, epoch, config.normalize_by_initial_loss, true))
                    .collect();
                let results: Vec<WindowResult> = results.into_iter().collect::<Result<_>>()?;
                let lr = cosine_lr(config.optimizer.lr, outer, total);
                let value = results.iter().map(|r| r.objective).sum::<f64>() / results.len() as f64;
                if results.iter().all(|r| r.finite) && value.is_finite() {
                    let mut grads: Vec<Array2<f64>> =
                        net.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
                    for r in &results {
                        for (acc, g) in grads.iter_mut().zip(r.grads.as_ref().expect("requested")) {
                            *acc += g;
                        }
                    }
                    let inv = 1.0 / results.len() as f64;
                    grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * inv));
                    clip_global_norm(&mut grads, config.optimizer.clip_norm);
                    opt.step(&mut net.params, &grads, lr, &decay_mask);
                    rollouts = results.into_iter().map(|r| r.end).collect();
                } else {
                    bad += 1;
                    if bad > config.max_bad_windows {
                        return Err(L2oError::Training(format!(
                            "{bad} non-finite windows (last at epoch {epoch}, outer step {outer})"
                        )));
                    }
                    // Keep the window-start iterates; damp the carried state.
                    for r in &mut rollouts {
                        r.state.moments.m.iter_mut().for_each(|v| *v *= 0.5);
                        r.state.moments.v.iter_mut().for_each(|v| *v *= 0.5);
                        if let Some(h) = r.state.prev_hidden.as_mut() {
                            h.mapv_inplace(|v| v * 0.5);
                        }
                        r.state.iteration += steps;
                    }
                }
                outer += 1;
                log.push(TrainLogRow { outer_step: outer, meta_loss: value, lr, wall_seconds: clock.elapsed().as_secs_f64() });
                done += steps;
                if let (Some(path), true) = (&ckpt_path, config.checkpoint_every > 0 && outer % config.checkpoint_every == 0) {
                    checkpoint::save(&net, path)?;
                }
            }
        }
    }
    if let Some(d) = out_dir {
        checkpoint::save(&net, d.join(CHECKPOINT_FILE))?;
        write_training_log(&log, d.join(LOG_FILE))?;
    }
    Ok(TrainOutcome { net, log, skipped_windows: bad, completed })
}
