mod common;

use std::time::Instant;

use common::{dense_oracle, rel_err, rel_err_vec, small_problem};
use proptest::prelude::*;

#[test]
fn sparse_evaluation_matches_dense_oracle() {
    let start = Instant::now();
    for seed in 0..100 {
        let sp = small_problem(seed, 50, 20);
        let p = &sp.problem;
        let (loss, comps, grad, split) = dense_oracle(&sp, &sp.x);
        let eval = p.evaluate(&sp.x).unwrap();
        assert!(rel_err(eval.loss, loss) <= 1e-12, "seed {seed}: loss {} vs {loss}", eval.loss);
        for (a, b) in eval.component_losses.iter().zip(&comps) {
            assert!(rel_err(*a, *b) <= 1e-12 || (a - b).abs() < 1e-300);
        }
        let g = p.gradient(&sp.x).unwrap();
        assert!(rel_err_vec(&g, &grad) <= 1e-12, "seed {seed}: gradient");
        let s = p.split_gradients(&sp.x).unwrap();
        for j in 0..p.n_spots() {
            let row: Vec<f64> = s.row(j).to_vec();
            assert!(rel_err_vec(&row, &split[j]) <= 1e-12, "seed {seed}: split row {j}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..100 {
        let sp = small_problem(1000 + seed, 30, 10);
        let p = &sp.problem;
        let g = p.gradient(&sp.x).unwrap();
        let fd: Vec<f64> = (0..p.n_spots())
            .map(|j| {
                let h = 1e-5 * sp.x[j].abs().max(1.0);
                let mut xp = sp.x.clone();
                let mut xm = sp.x.clone();
                xp[j] += h;
                xm[j] -= h;
                (p.objective(&xp).unwrap() - p.objective(&xm).unwrap()) / (2.0 * h)
            })
            .collect();
        let err = rel_err_vec(&g, &fd);
        assert!(err <= 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn hessian_vector_matches_gradient_differences() {
    for seed in 0..30 {
        let sp = small_problem(5000 + seed, 30, 10);
        let p = &sp.problem;
        let eval = p.evaluate(&sp.x).unwrap();
        let u: Vec<f64> = (0..p.n_spots()).map(|j| ((j * 7 + 3) % 5) as f64 - 2.0).collect();
        let mut hv = vec![0.0; p.n_spots()];
        for k in 0..p.n_objectives() {
            for (a, b) in hv.iter_mut().zip(p.component_hessian_vector(&eval, k, &u)) {
                *a += b;
            }
        }
        let h = 1e-7;
        let xp: Vec<f64> = sp.x.iter().zip(&u).map(|(x, d)| x + h * d).collect();
        let xm: Vec<f64> = sp.x.iter().zip(&u).map(|(x, d)| x - h * d).collect();
        let (gp, gm) = (p.gradient(&xp).unwrap(), p.gradient(&xm).unwrap());
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(rel_err_vec(&hv, &fd) <= 1e-5, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_columns_sum_to_gradient(seed in 0u64..10_000, scale in 0.0f64..3.0) {
        let sp = small_problem(seed, 20, 8);
        let x: Vec<f64> = sp.x.iter().map(|v| v * scale).collect();
        let g = sp.problem.gradient(&x).unwrap();
        let s = sp.problem.split_gradients(&x).unwrap();
        for j in 0..g.len() {
            let sum: f64 = s.row(j).sum();
            prop_assert!((sum - g[j]).abs() <= 1e-12 * g[j].abs().max(1.0));
        }
    }

    #[test]
    fn loss_is_nonnegative_and_components_add_up(seed in 0u64..10_000) {
        let sp = small_problem(seed, 20, 8);
        let e = sp.problem.evaluate(&sp.x).unwrap();
        prop_assert!(e.loss >= 0.0);
        prop_assert!(e.component_losses.iter().all(|&c| c >= 0.0));
        let sum: f64 = e.component_losses.iter().sum();
        prop_assert!((sum - e.loss).abs() <= 1e-12 * e.loss.max(1.0));
    }

    #[test]
    fn doubling_weights_doubles_loss_and_gradient(seed in 0u64..10_000) {
        let sp = small_problem(seed, 20, 8);
        let p = &sp.problem;
        let params: Vec<(f64, f64)> = p.objectives.iter().map(|o| (2.0 * o.weight, o.dose_limit)).collect();
        let q = p.with_objective_parameters(&params).unwrap();
        let (l1, g1) = p.loss_and_gradient(&sp.x).unwrap();
        let (l2, g2) = q.loss_and_gradient(&sp.x).unwrap();
        prop_assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l2.max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn rejects_mismatched_spot_vectors() {
    let sp = small_problem(3, 20, 8);
    let short = vec![1.0; sp.problem.n_spots() - 1];
    assert!(sp.problem.evaluate(&short).is_err());
    let mut nan = sp.x.clone();
    nan[0] = f64::NAN;
    assert!(sp.problem.evaluate(&nan).is_err());
}
