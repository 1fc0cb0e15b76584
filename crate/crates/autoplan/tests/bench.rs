use std::sync::Arc;

use pbs_autoplan::bench::{bench_effectiveness, bench_efficiency, overall, write_bench_csv, Protocol};
use pbs_core::PhantomSampler;
use pbs_l2o::{L2OConfig, L2ONetwork};

#[test]
fn protocols_run_end_to_end_and_write_csv() {
    let sampler = PhantomSampler { grid_dims: [32, 32, 20], target_radius_mm: [6.0, 8.0], ..Default::default() };
    let net = L2ONetwork::new(L2OConfig::compact()).unwrap();
    let problem = Arc::new(sampler.generate(3).unwrap());

    let eff = bench_effectiveness("c0", problem.clone(), &net).unwrap();
    assert_eq!(eff.reference.iterations(), 100);
    let m = eff.case.metric.unwrap();
    let expected = 100.0 * (eff.case.reference.loss_min - eff.case.l2o.loss_min) / eff.case.reference.loss_min;
    assert_eq!(m, expected);
    // An untrained network never moves, so L-BFGS-B wins.
    assert!(m < 0.0);

    let fast = bench_efficiency("c0", problem, &net).unwrap();
    assert_eq!(fast.case.metric, None);

    let cases = vec![eff.case, fast.case];
    assert_eq!(overall(&cases), Some(m));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    write_bench_csv(&cases, Protocol::Efficiency, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "case,optimizer,iterations,seconds,loss_min,efficiency");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].ends_with(",failed"));
}
