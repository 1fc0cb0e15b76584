use std::sync::Arc;

use pbs_core::matrix::DoseInfluenceMatrix;
use pbs_core::problem::{ObjectiveComponent, ObjectiveKind, PlanProblem, Structure, StructureKind};
use pbs_core::PhantomSampler;
use pbs_core::trace::Budget;
use pbs_l2o::meta::{run_window, train, weight_schedule, MetaConfig, Rollout};
use pbs_l2o::{l2o_minimize, L2OConfig, L2ONetwork, L2OOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_problem() -> PlanProblem {
    let m = DoseInfluenceMatrix::from_dense(3, 2, &[0.02, 0.01, 0.01, 0.02, 0.005, 0.004]).unwrap();
    let structures = vec![
        Structure::new("CTV", StructureKind::Target, vec![0, 1]),
        Structure::new("SpinalCord", StructureKind::Oar, vec![2]),
    ];
    let objectives = vec![
        ObjectiveComponent { structure: 0, kind: ObjectiveKind::DMin, weight: 1.0, dose_limit: 60.0 },
        ObjectiveComponent { structure: 1, kind: ObjectiveKind::DMax, weight: 0.5, dose_limit: 1.0 },
    ];
    PlanProblem::new(m, structures, objectives, 1).unwrap().with_prescription("CTV", 60.0).unwrap()
}

fn tiny_config() -> L2OConfig {
    L2OConfig { hidden: 8, intermediate: 16, n_layers: 1, n_heads: 2, n_kv_heads: 1, ..L2OConfig::default() }
}

/// Random network whose output head is switched on.
fn randomized(config: L2OConfig, seed: u64, head_std: f64) -> L2ONetwork {
    let mut net = L2ONetwork::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["head.weight", "head.bias", "recurrent.weight"] {
        net.param_mut(name).unwrap().mapv_inplace(|_| head_std * rng.random_range(-1.0..1.0));
    }
    net.param_mut("step_scale").unwrap().fill(1.0);
    net
}

#[test]
fn meta_gradient_matches_parameter_finite_differences() {
    let problem = Arc::new(toy_problem());
    let net = randomized(tiny_config(), 1, 0.5);
    let start = Rollout::start(problem).unwrap();
    let w = run_window(&net, &start, 2, 1, false, true).unwrap();
    assert!(w.finite);
    let grads = w.grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (p, g) in grads.iter().enumerate() {
        for _ in 0..4 {
            let idx = rng.random_range(0..g.len());
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let h = 1e-5 * net.params[p][[r, c]].abs().max(1e-2);
            let eval = |delta: f64| {
                let mut n = net.clone();
                n.params[p][[r, c]] += delta;
                run_window(&n, &start, 2, 1, false, false).unwrap().objective
            };
            analytic.push(g[[r, c]]);
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    assert!(diff / norm <= 1e-3, "relative error {:e}", diff / norm);
}

#[test]
fn schedule_on_a_grid() {
    for n_epoch in 1..=100 {
        for n_step in 1..=100 {
            let w = weight_schedule(n_step, n_epoch).unwrap();
            assert!(w > 0.0 && w <= 1.0);
        }
    }
    assert_eq!(weight_schedule(20, 10).unwrap(), 1.0);
    assert_eq!(weight_schedule(1, 10).unwrap(), 0.05);
    assert_eq!(weight_schedule(40, 20).unwrap(), 0.5);
}

fn small_sampler() -> PhantomSampler {
    PhantomSampler {
        grid_dims: [32, 32, 20],
        target_radius_mm: [6.0, 8.0],
        oar_radius_mm: [3.0, 5.0],
        max_oars: 3,
        ..PhantomSampler::default()
    }
}

#[test]
fn clipping_holds_for_all_fraction_counts() {
    let net = randomized(L2OConfig::compact(), 3, 2.0);
    for seed in 0..10u64 {
        let fx = [1, 5, 30][seed as usize % 3];
        let sampler = PhantomSampler { fractions: vec![fx], ..small_sampler() };
        let p = Arc::new(sampler.generate(seed).unwrap());
        let (lo, hi) = (3.0 * fx as f64, 300.0 * fx as f64);
        let x0 = p.default_start();
        let trace = l2o_minimize(p, &net, &x0, Budget::iterations(70), &L2OOptions { record_x: true }).unwrap();
        assert_eq!(trace.iterations(), 70, "seed {seed}: {:?}", trace.termination);
        for e in trace.entries.iter().filter(|e| e.iter > 50) {
            let x = e.x.as_ref().unwrap();
            assert!(x.iter().all(|&v| v >= lo && v <= hi), "seed {seed}, iteration {}", e.iter);
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let net = randomized(L2OConfig::compact(), 4, 0.3);
    let p = Arc::new(small_sampler().generate(7).unwrap());
    let x0 = p.default_start();
    let run = || l2o_minimize(p.clone(), &net, &x0, Budget::iterations(30), &L2OOptions::default()).unwrap();
    let (a, b) = (run(), run());
    let bits = |t: &pbs_core::RunTrace| t.entries.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.final_x, b.final_x);
}

#[test]
fn untrained_network_keeps_the_start_point() {
    let net = L2ONetwork::new(L2OConfig::compact()).unwrap();
    let p = Arc::new(small_sampler().generate(8).unwrap());
    let x0 = p.default_start();
    let trace = l2o_minimize(p, &net, &x0, Budget::iterations(5), &L2OOptions::default()).unwrap();
    assert_eq!(trace.final_x, x0);
}

#[test]
fn training_lowers_final_loss_and_is_reproducible() {
    let problems: Vec<Arc<PlanProblem>> = (0..8).map(|s| Arc::new(small_sampler().generate(100 + s).unwrap())).collect();
    let config = MetaConfig {
        network: L2OConfig::compact(),
        epochs: 5,
        rollout_steps: 100,
        normalize_by_initial_loss: true,
        ..MetaConfig::default()
    };
    assert_eq!(config.total_outer_steps(problems.len()), 200);
    let outcome = train(&config, &problems, None, None).unwrap();
    assert_eq!(outcome.log.len(), 200);
    assert_eq!(outcome.skipped_windows, 0);
    let mut improved = 0;
    for p in &problems {
        let x0 = p.default_start();
        let f0 = p.objective(&x0).unwrap();
        let t = l2o_minimize(p.clone(), &outcome.net, &x0, Budget::iterations(100), &L2OOptions::default()).unwrap();
        if t.final_loss() < f0 {
            improved += 1;
        }
    }
    assert_eq!(improved, problems.len());

    let short = MetaConfig { epochs: 1, rollout_steps: 40, ..config };
    let a = train(&short, &problems[..2], None, None).unwrap();
    let b = train(&short, &problems[..2], None, None).unwrap();
    assert_eq!(a.net.params, b.net.params);
}
