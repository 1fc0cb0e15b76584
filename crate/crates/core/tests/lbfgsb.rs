mod common;

use common::small_problem;
use pbs_core::lbfgsb::{minimize, Bounds, FnObjective, LbfgsbOptions};
use pbs_core::trace::{Budget, Termination};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Qp {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    bounds: Bounds,
}

impl Qp {
    fn random(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| q[k][i] * q[k][j]).sum::<f64>() / n as f64 + if i == j { 0.05 } else { 0.0 })
                    .collect()
            })
            .collect();
        let b = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.2..2.0)).collect();
        Self { a, b, bounds: Bounds { lo, hi } }
    }

    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let ax: Vec<f64> = self.a.iter().map(|row| row.iter().zip(x).map(|(a, v)| a * v).sum()).collect();
        let f = 0.5 * ax.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + self.b.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        let g = ax.iter().zip(&self.b).map(|(a, b)| a + b).collect();
        (f, g)
    }

    /// Projected gradient descent with step 1/L run to a fixed point.
    fn oracle(&self) -> f64 {
        let lipschitz = self.a.iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let mut x = self.bounds.lo.clone();
        for _ in 0..200_000 {
            let (_, g) = self.eval(&x);
            let mut next: Vec<f64> = x.iter().zip(&g).map(|(v, g)| v - g / lipschitz).collect();
            self.bounds.project(&mut next);
            let moved = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = next;
            if moved < 1e-15 {
                break;
            }
        }
        self.eval(&x).0
    }
}

#[test]
fn convex_qps_match_projected_gradient_oracle() {
    for seed in 0..20 {
        let qp = Qp::random(seed, 20);
        let obj = FnObjective::new(20, |x: &[f64]| qp.eval(x));
        let mut x0 = vec![0.0; 20];
        qp.bounds.project(&mut x0);
        let trace = minimize(&obj, &x0, &qp.bounds, Budget::iterations(2000), &LbfgsbOptions::default()).unwrap();
        let best = qp.oracle();
        assert!((trace.final_loss() - best).abs() <= 1e-6, "seed {seed}: {} vs {best}", trace.final_loss());
        assert!(qp.bounds.contains(&trace.final_x));
        for w in trace.entries.windows(2) {
            assert!(w[1].loss <= w[0].loss, "seed {seed}: ascent at iteration {}", w[1].iter);
        }
    }
}

#[test]
fn unbounded_quadratic_reaches_stationary_point() {
    let qp = Qp::random(99, 10);
    let obj = FnObjective::new(10, |x: &[f64]| qp.eval(x));
    let opts = LbfgsbOptions { pg_tolerance: 1e-8, ..LbfgsbOptions::default() };
    let trace = minimize(&obj, &vec![0.0; 10], &Bounds::unbounded(10), Budget::iterations(500), &opts).unwrap();
    assert!(matches!(trace.termination, Termination::Converged | Termination::LineSearchFailed));
    let (_, g) = qp.eval(&trace.final_x);
    assert!(g.iter().all(|v| v.abs() <= 1e-6), "{g:?}");
}

#[test]
fn start_outside_box_is_rejected() {
    let qp = Qp::random(7, 20);
    let obj = FnObjective::new(20, |x: &[f64]| qp.eval(x));
    assert!(minimize(&obj, &vec![50.0; 20], &qp.bounds, Budget::iterations(50), &LbfgsbOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plan_problems_descend_monotonically_inside_the_box(seed in 0u64..10_000) {
        let sp = small_problem(seed, 40, 15);
        let p = &sp.problem;
        let bounds = Bounds::for_problem(p);
        let mut x0 = sp.x.clone();
        bounds.project(&mut x0);
        let opts = LbfgsbOptions { record_x: true, ..Default::default() };
        let trace = minimize(p, &x0, &bounds, Budget::iterations(60), &opts).unwrap();
        for w in trace.entries.windows(2) {
            prop_assert!(w[1].loss <= w[0].loss);
        }
        for e in &trace.entries {
            prop_assert!(bounds.contains(e.x.as_ref().unwrap()));
        }
    }
}
