use std::sync::Arc;

use pbs_autoplan::episode::select_best_round;
use pbs_autoplan::init::scripted_d_predict;
use pbs_autoplan::ppo::{ppo_train, PpoActor, PpoConfig};
use pbs_autoplan::{
    init_objectives, run_episode, EpisodeConfig, IdentityPolicy, InnerConfig, ObjectiveParams, RulePolicy,
};
use pbs_core::plan_eval::{plan_score, ScoringOptions};
use pbs_core::{ClinicalGoalTable, PhantomSampler, PlanProblem};

fn sampler() -> PhantomSampler {
    PhantomSampler { grid_dims: [32, 32, 20], target_radius_mm: [6.0, 8.0], oar_radius_mm: [3.0, 5.0], ..Default::default() }
}

fn case(seed: u64) -> (PlanProblem, ObjectiveParams) {
    let goals = ClinicalGoalTable::shipped();
    let problem = sampler().generate(seed).unwrap();
    let predicted = scripted_d_predict(&problem, &goals, 30, 0.1, seed).unwrap();
    let params = init_objectives(&problem, &predicted, &goals).unwrap();
    (problem, params)
}

fn short(adjustments: usize) -> EpisodeConfig {
    EpisodeConfig { inner: InnerConfig { max_iters: 40, ..Default::default() }, adjustments, ..Default::default() }
}

#[test]
fn rule_episode_structure() {
    let goals = ClinicalGoalTable::shipped();
    for seed in 0..3 {
        let (problem, params) = case(seed);
        let ep = run_episode(&problem, &params, &mut RulePolicy::default(), &goals, &short(4), None).unwrap();
        assert_eq!(ep.rounds.len(), 5);
        assert_eq!(ep.rounds[0].params, params);
        assert!(ep.rounds[..4].iter().all(|r| r.action.is_some()));
        assert!(ep.rounds[4].action.is_none());
        let last = ep.rounds.last().unwrap().score;
        assert!((ep.total_reward() - (last - ep.start_score)).abs() <= 1e-9 * (1.0 + last.abs()));
        assert_eq!(ep.rounds[0].reward, ep.rounds[0].score - ep.start_score);
        for w in ep.rounds.windows(2) {
            assert_eq!(w[1].reward, w[1].score - w[0].score);
            assert_eq!(w[1].params, w[0].action.as_ref().unwrap().apply(&w[0].params).unwrap());
        }
        let rescored = plan_score(&problem, &ep.best_x, &goals, &ScoringOptions::default()).unwrap();
        assert_eq!(rescored.total_score, ep.best_score());
        let reports: Vec<_> = ep.rounds.iter().map(|r| &r.report).collect();
        assert_eq!(select_best_round(&reports, 0.005), ep.best_round);
    }
}

#[test]
fn zero_adjustments_is_a_single_round() {
    let goals = ClinicalGoalTable::shipped();
    let (problem, params) = case(4);
    let ep = run_episode(&problem, &params, &mut RulePolicy::default(), &goals, &short(0), None).unwrap();
    assert_eq!(ep.rounds.len(), 1);
    assert_eq!(ep.best_round, 0);
}

#[test]
fn identity_policy_keeps_parameters() {
    let goals = ClinicalGoalTable::shipped();
    let (problem, params) = case(5);
    let ep = run_episode(&problem, &params, &mut IdentityPolicy, &goals, &short(3), None).unwrap();
    assert!(ep.rounds.iter().all(|r| r.params == params));
}

#[test]
fn rule_policy_does_not_lower_the_best_score() {
    let goals = ClinicalGoalTable::shipped();
    for seed in 10..14 {
        let (problem, params) = case(seed);
        let ep = run_episode(&problem, &params, &mut RulePolicy::default(), &goals, &short(4), None).unwrap();
        assert!(ep.best_score() >= ep.rounds[0].score, "seed {seed}");
    }
}

#[test]
fn warm_start_must_match_problem() {
    let goals = ClinicalGoalTable::shipped();
    let (problem, params) = case(6);
    assert!(run_episode(&problem, &params, &mut IdentityPolicy, &goals, &short(1), Some(&[1.0])).is_err());
}

#[test]
fn ppo_training_is_reproducible_and_initially_identity() {
    let goals = ClinicalGoalTable::shipped();
    let problems: Vec<(Arc<PlanProblem>, ObjectiveParams)> = (20..22)
        .map(|s| {
            let (p, params) = case(s);
            (Arc::new(p), params)
        })
        .collect();
    let config = PpoConfig { iterations: 2, batch_episodes: 2, inner_max_iters: 15, adjustments: 2, seed: 3, ..Default::default() };
    let (a, log_a) = ppo_train(&problems, &goals, &config).unwrap();
    let (b, log_b) = ppo_train(&problems, &goals, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 2);
    assert!(log_a.iter().all(|r| r.mean_reward.is_finite() && r.policy_loss.is_finite()));

    let fresh = pbs_autoplan::ppo::PpoPolicy::new(&config, 9);
    let (problem, params) = &problems[0];
    let mut actor = PpoActor::deterministic(&fresh);
    let ep = run_episode(problem, params, &mut actor, &goals, &short(2), None).unwrap();
    assert!(ep.rounds.iter().all(|r| r.params == *params));
}

#[test]
fn trained_ppo_policy_is_not_worse_than_identity_on_held_out_cases() {
    let goals = ClinicalGoalTable::shipped();
    let make = |seeds: std::ops::Range<u64>| -> Vec<(Arc<PlanProblem>, ObjectiveParams)> {
        seeds
            .map(|s| {
                let (p, params) = case(s);
                (Arc::new(p), params)
            })
            .collect()
    };
    let (train_set, held_out) = (make(100..132), make(200..208));
    let config = PpoConfig { iterations: 6, batch_episodes: 8, inner_max_iters: 40, seed: 11, ..Default::default() };
    let (policy, log) = ppo_train(&train_set, &goals, &config).unwrap();
    assert_eq!(log.len(), 6);
    let episode = short(4);
    let (mut ppo_best, mut identity_best) = (0.0, 0.0);
    for (p, params) in &held_out {
        let mut actor = PpoActor::deterministic(&policy);
        ppo_best += run_episode(p, params, &mut actor, &goals, &episode, None).unwrap().best_score();
        identity_best += run_episode(p, params, &mut IdentityPolicy, &goals, &episode, None).unwrap().best_score();
    }
    assert!(ppo_best >= identity_best, "ppo {ppo_best} vs identity {identity_best}");
}
