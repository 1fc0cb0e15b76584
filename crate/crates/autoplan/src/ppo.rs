//! Learned adjustment policy trained with clipped-surrogate PPO.
//!
//! Observation: six features per objective slot (presence, log weight,
//! limit, root penalty, mean dose and max dose of the structure, doses
//! relative to Rx_max) plus the episode progress. Action: a Gaussian over
//! two log-factors per slot (weight, limit); unused slots are masked out of
//! the likelihood. Rewards are round score deltas divided by the magnitude
//! of the round-0 score so problems of different scale train together.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use pbs_core::plan_eval::{ClinicalGoalTable, PlanReport};
use pbs_core::problem::PlanProblem;
use pbs_l2o::adamw::{clip_global_norm, AdamW, AdamWConfig};
use pbs_l2o::slots::{assign_slots, N_SLOTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::action::AdjustmentAction;
use crate::episode::{run_episode, EpisodeConfig, EpisodeRecord, InnerConfig, Policy, PolicyInput};
use crate::error::{AutoplanError, Result};
use crate::init::ObjectiveParams;
use crate::mlp::Mlp;

pub const SLOT_FEATURES: usize = 6;
pub const OBS_DIM: usize = N_SLOTS * SLOT_FEATURES + 1;
pub const ACT_DIM: usize = 2 * N_SLOTS;
pub const PPO_VERSION: &str = "ppo/1";

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fixed-width observation for one planning state.
pub fn observation(
    problem: &PlanProblem,
    report: &PlanReport,
    params: &ObjectiveParams,
    round: usize,
    adjustments: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let slots = assign_slots(problem)?;
    let scale = problem.rx_max().filter(|r| *r > 0.0).unwrap_or(70.0);
    let mut obs = vec![0.0; OBS_DIM];
    for (k, o) in problem.objectives.iter().enumerate() {
        let name = &problem.structures[o.structure].name;
        let base = slots[k] * SLOT_FEATURES;
        let (w, d) = params[k];
        obs[base] = 1.0;
        obs[base + 1] = w.max(1e-12).ln();
        obs[base + 2] = d / scale;
        if let Some(s) = report.structure(name) {
            obs[base + 3] = s.penalty.max(0.0).sqrt() / scale;
            obs[base + 4] = s.metrics.dmean / scale;
            obs[base + 5] = s.metrics.dmax / scale;
        }
    }
    obs[OBS_DIM - 1] = (round + 1) as f64 / (adjustments + 1) as f64;
    Ok((obs, slots))
}

fn action_mask(slots: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; ACT_DIM];
    for &s in slots {
        mask[2 * s] = true;
        mask[2 * s + 1] = true;
    }
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub batch_episodes: usize,
    pub iterations: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub inner_max_iters: usize,
    pub adjustments: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            batch_episodes: 16,
            iterations: 8,
            lr: 3e-4,
            hidden: vec![64, 64],
            init_log_std: -2.0,
            max_grad_norm: 0.5,
            seed: 0,
            inner_max_iters: 200,
            adjustments: 4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip >= 0.0) || !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(AutoplanError::Config("clip must be ≥ 0, discount and lambda in [0, 1]".into()));
        }
        if self.epochs == 0 || self.batch_episodes == 0 || !(self.lr > 0.0) {
            return Err(AutoplanError::Config("epochs, batch_episodes and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoPolicy {
    pub version: String,
    pub policy: Mlp,
    /// `[1, ACT_DIM]` log standard deviations.
    pub log_std: Array2<f64>,
    pub value: Mlp,
}

impl PpoPolicy {
    pub fn new(config: &PpoConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = |out: usize| {
            let mut s = vec![OBS_DIM];
            s.extend(&config.hidden);
            s.push(out);
            s
        };
        Self {
            version: PPO_VERSION.into(),
            // Zero output layer: the initial mean action is the identity.
            policy: Mlp::new(&sizes(ACT_DIM), 0.0, &mut rng),
            log_std: Array2::from_elem((1, ACT_DIM), config.init_log_std),
            value: Mlp::new(&sizes(1), 1.0, &mut rng),
        }
    }

    pub fn mean(&self, obs: &[f64]) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, OBS_DIM), obs.to_vec()).expect("observation width");
        self.policy.forward(&x).0.row(0).to_vec()
    }

    pub fn value_of(&self, obs: &[f64]) -> f64 {
        let x = Array2::from_shape_vec((1, OBS_DIM), obs.to_vec()).expect("observation width");
        self.value.forward(&x).0[[0, 0]]
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64], mask: &[bool]) -> f64 {
        (0..ACT_DIM)
            .filter(|&j| mask[j])
            .map(|j| {
                let ls = self.log_std[[0, j]];
                let z = (action[j] - mean[j]) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if p.version != PPO_VERSION {
            return Err(AutoplanError::Config(format!("unsupported policy version `{}`", p.version)));
        }
        if p.policy.input_dim() != OBS_DIM || p.policy.output_dim() != ACT_DIM || p.log_std.dim() != (1, ACT_DIM) {
            return Err(AutoplanError::Config("policy dimensions do not match the slot layout".into()));
        }
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub mask: Vec<bool>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Runs a [`PpoPolicy`] inside episodes: samples when given an RNG, acts
/// on the mean otherwise, and records transitions.
pub struct PpoActor<'a> {
    pub policy: &'a PpoPolicy,
    pub rng: Option<ChaCha8Rng>,
    pub transitions: Vec<Transition>,
}

impl<'a> PpoActor<'a> {
    pub fn deterministic(policy: &'a PpoPolicy) -> Self {
        Self { policy, rng: None, transitions: Vec::new() }
    }

    pub fn sampling(policy: &'a PpoPolicy, seed: u64) -> Self {
        Self { policy, rng: Some(ChaCha8Rng::seed_from_u64(seed)), transitions: Vec::new() }
    }
}

impl Policy for PpoActor<'_> {
    fn propose(&mut self, input: &PolicyInput<'_>) -> Result<AdjustmentAction> {
        let (obs, slots) = observation(input.problem, input.report, input.params, input.round, input.adjustments)?;
        let mask = action_mask(&slots);
        let mean = self.policy.mean(&obs);
        let mut action = mean.clone();
        if let Some(rng) = self.rng.as_mut() {
            for j in (0..ACT_DIM).filter(|&j| mask[j]) {
                let e: f64 = StandardNormal.sample(rng);
                action[j] += self.policy.log_std[[0, j]].exp() * e;
            }
        }
        let log_w: Vec<f64> = slots.iter().map(|&s| action[2 * s]).collect();
        let log_d: Vec<f64> = slots.iter().map(|&s| action[2 * s + 1]).collect();
        let out = AdjustmentAction::from_log_factors(&log_w, &log_d)?;
        let log_prob = self.policy.log_prob(&mean, &action, &mask);
        let value = self.policy.value_of(&obs);
        self.transitions.push(Transition { obs, action, mask, log_prob, value, reward: 0.0, advantage: 0.0, ret: 0.0 });
        Ok(out)
    }
}

/// Attaches rewards (round `r+1` delta for the action taken after round `r`)
/// and GAE advantages to one episode's transitions.
pub fn finish_episode(transitions: &mut [Transition], episode: &EpisodeRecord, discount: f64, lambda: f64) {
    let scale = episode.rounds[0].score.abs().max(1e-6);
    for (t, tr) in transitions.iter_mut().enumerate() {
        tr.reward = episode.rounds[t + 1].reward / scale;
    }
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for tr in transitions.iter_mut().rev() {
        let delta = tr.reward + discount * next_value - tr.value;
        tr.advantage = delta + discount * lambda * next_adv;
        tr.ret = tr.advantage + tr.value;
        next_adv = tr.advantage;
        next_value = tr.value;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

pub struct PpoOptimizers {
    policy: AdamW,
    value: AdamW,
}

impl PpoOptimizers {
    pub fn new(policy: &PpoPolicy, lr: f64) -> Self {
        let cfg = AdamWConfig { lr, weight_decay: 0.0, clip_norm: 0.0, ..Default::default() };
        let mut pi_params = policy.policy.params.clone();
        pi_params.push(policy.log_std.clone());
        Self { policy: AdamW::new(cfg.clone(), &pi_params), value: AdamW::new(cfg, &policy.value.params) }
    }
}

/// One PPO update (several epochs over the full batch). Advantages are
/// normalized within the batch.
pub fn ppo_update(
    policy: &mut PpoPolicy,
    opt: &mut PpoOptimizers,
    batch: &[Transition],
    config: &PpoConfig,
) -> UpdateStats {
    let b = batch.len();
    if b == 0 {
        return UpdateStats::default();
    }
    let mean_adv = batch.iter().map(|t| t.advantage).sum::<f64>() / b as f64;
    let std_adv = (batch.iter().map(|t| (t.advantage - mean_adv).powi(2)).sum::<f64>() / b as f64).sqrt();
    let adv: Vec<f64> = batch.iter().map(|t| (t.advantage - mean_adv) / (std_adv + 1e-8)).collect();
    let x = Array2::from_shape_fn((b, OBS_DIM), |(i, j)| batch[i].obs[j]);
    let mut stats = UpdateStats::default();
    for _ in 0..config.epochs {
        let (mu, cache) = policy.policy.forward(&x);
        let mut d_mu = Array2::zeros((b, ACT_DIM));
        let mut d_log_std = Array2::zeros((1, ACT_DIM));
        let (mut loss, mut clipped) = (0.0, 0);
        for (i, tr) in batch.iter().enumerate() {
            let mean: Vec<f64> = mu.row(i).to_vec();
            let ratio = (policy.log_prob(&mean, &tr.action, &tr.mask) - tr.log_prob).exp();
            let a = adv[i];
            let clipped_ratio = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
            loss -= (ratio * a).min(clipped_ratio * a) / b as f64;
            // The unclipped branch carries gradient only strictly inside
            // the trust region.
            let active = (a > 0.0 && ratio < 1.0 + config.clip) || (a < 0.0 && ratio > 1.0 - config.clip);
            if !active {
                clipped += 1;
                continue;
            }
            let d_logp = -a * ratio / b as f64;
            for j in (0..ACT_DIM).filter(|&j| tr.mask[j]) {
                let var = (2.0 * policy.log_std[[0, j]]).exp();
                let diff = tr.action[j] - mean[j];
                d_mu[[i, j]] += d_logp * diff / var;
                d_log_std[[0, j]] += d_logp * (diff * diff / var - 1.0);
            }
        }
        let mut grads = policy.policy.backward(&cache, &d_mu);
        grads.push(d_log_std);
        clip_global_norm(&mut grads, config.max_grad_norm);
        let mut params = std::mem::take(&mut policy.policy.params);
        params.push(policy.log_std.clone());
        let mask = vec![false; params.len()];
        opt.policy.step(&mut params, &grads, config.lr, &mask);
        policy.log_std = params.pop().expect("log_std");
        policy.policy.params = params;

        let (v, vcache) = policy.value.forward(&x);
        let mut dv = Array2::zeros((b, 1));
        let mut vloss = 0.0;
        for (i, tr) in batch.iter().enumerate() {
            let e = v[[i, 0]] - tr.ret;
            vloss += 0.5 * e * e / b as f64;
            dv[[i, 0]] = e / b as f64;
        }
        let mut vgrads = policy.value.backward(&vcache, &dv);
        clip_global_norm(&mut vgrads, config.max_grad_norm);
        let vmask = vec![false; vgrads.len()];
        opt.value.step(&mut policy.value.params, &vgrads, config.lr, &vmask);
        stats = UpdateStats { policy_loss: loss, value_loss: vloss, clip_fraction: clipped as f64 / b as f64 };
    }
    stats
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoLogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_best_score: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// Trains a policy on `problems`, each paired with its initial parameters.
pub fn ppo_train(
    problems: &[(Arc<PlanProblem>, ObjectiveParams)],
    goals: &ClinicalGoalTable,
    config: &PpoConfig,
) -> Result<(PpoPolicy, Vec<PpoLogRow>)> {
    config.validate()?;
    if problems.is_empty() {
        return Err(AutoplanError::Config("no training problems".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = PpoPolicy::new(config, rng.random());
    let mut opt = PpoOptimizers::new(&policy, config.lr);
    let episode_cfg = EpisodeConfig {
        inner: InnerConfig { max_iters: config.inner_max_iters, ..Default::default() },
        adjustments: config.adjustments,
        ..Default::default()
    };
    let mut log = Vec::new();
    for iteration in 0..config.iterations {
        let mut batch = Vec::new();
        let (mut reward_sum, mut best_sum) = (0.0, 0.0);
        for _ in 0..config.batch_episodes {
            let (problem, params) = &problems[rng.random_range(0..problems.len())];
            let mut actor = PpoActor::sampling(&policy, rng.random());
            let episode = run_episode(problem, params, &mut actor, goals, &episode_cfg, None)?;
            let mut transitions = actor.transitions;
            finish_episode(&mut transitions, &episode, config.discount, config.gae_lambda);
            reward_sum += transitions.iter().map(|t| t.reward).sum::<f64>();
            best_sum += episode.best_score();
            batch.extend(transitions);
        }
        let mean_reward = reward_sum / config.batch_episodes as f64;
        if !mean_reward.is_finite() {
            return Err(AutoplanError::Diverged(format!("mean reward {mean_reward} at iteration {iteration}")));
        }
        let stats = ppo_update(&mut policy, &mut opt, &batch, config);
        log.push(PpoLogRow {
            iteration,
            mean_reward,
            mean_best_score: best_sum / config.batch_episodes as f64,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
        });
    }
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_batch(n: usize) -> Vec<Transition> {
        (0..n)
            .map(|i| {
                let mut mask = vec![false; ACT_DIM];
                mask[0] = true;
                mask[1] = true;
                let mut obs = vec![0.0; OBS_DIM];
                obs[0] = 1.0;
                obs[3] = i as f64 * 0.1;
                let mut action = vec![0.0; ACT_DIM];
                action[0] = if i % 2 == 0 { 0.1 } else { -0.1 };
                Transition {
                    log_prob: 0.0,
                    obs,
                    action,
                    mask,
                    value: 0.0,
                    reward: 0.0,
                    advantage: if i % 2 == 0 { 1.0 } else { -1.0 },
                    ret: 1.0,
                }
            })
            .collect()
    }

    fn with_current_log_probs(policy: &PpoPolicy, mut batch: Vec<Transition>) -> Vec<Transition> {
        for t in &mut batch {
            t.log_prob = policy.log_prob(&policy.mean(&t.obs), &t.action, &t.mask);
        }
        batch
    }

    #[test]
    fn zero_clip_freezes_policy() {
        let config = PpoConfig { clip: 0.0, ..Default::default() };
        let mut policy = PpoPolicy::new(&config, 1);
        let batch = with_current_log_probs(&policy, fake_batch(8));
        let before = (policy.policy.clone(), policy.log_std.clone());
        let mut opt = PpoOptimizers::new(&policy, 1e-2);
        ppo_update(&mut policy, &mut opt, &batch, &config);
        assert_eq!((policy.policy.clone(), policy.log_std.clone()), before);
    }

    #[test]
    fn positive_advantage_raises_likelihood() {
        let config = PpoConfig::default();
        let mut policy = PpoPolicy::new(&config, 2);
        let batch = with_current_log_probs(&policy, fake_batch(8));
        let mut opt = PpoOptimizers::new(&policy, 1e-3);
        ppo_update(&mut policy, &mut opt, &batch, &config);
        let t = &batch[0];
        let new_lp = policy.log_prob(&policy.mean(&t.obs), &t.action, &t.mask);
        assert!(new_lp > t.log_prob);
    }

    #[test]
    fn initial_mean_is_identity() {
        let policy = PpoPolicy::new(&PpoConfig::default(), 3);
        assert!(policy.mean(&vec![0.3; OBS_DIM]).iter().all(|&m| m == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let policy = PpoPolicy::new(&PpoConfig::default(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        policy.save(&path).unwrap();
        assert_eq!(PpoPolicy::load(&path).unwrap(), policy);
    }
}
