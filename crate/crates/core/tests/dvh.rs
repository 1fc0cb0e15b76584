use pbs_core::plan_eval::{dvh_metric, DvhMetric};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full-sort reference for the interpolated descending-rank dose.
fn sorted_dose_at(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let n = v.len() as f64;
    let q = q.clamp(1.0, n);
    let (lo, hi) = (q.floor(), q.ceil());
    let a = v[lo as usize - 1];
    let b = v[hi as usize - 1];
    a + (q - lo) * (b - a)
}

#[test]
fn metrics_match_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let dose: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..80.0)).collect();
        let p = rng.random_range(0.5..100.0);
        let got = dvh_metric(&dose, DvhMetric::DosePercent(p)).unwrap();
        assert!((got - sorted_dose_at(&dose, p / 100.0 * n as f64)).abs() <= 1e-9);
        let d = rng.random_range(0.0..80.0);
        let got = dvh_metric(&dose, DvhMetric::VolumeAtDose(d)).unwrap();
        let frac = dose.iter().filter(|&&v| v >= d).count() as f64 / n as f64;
        assert!((got - frac).abs() <= 1e-9);
        let got = dvh_metric(&dose, DvhMetric::Mean).unwrap();
        assert!((got - dose.iter().sum::<f64>() / n as f64).abs() <= 1e-9);
        let cc = rng.random_range(0.001..2.0);
        let got = dvh_metric(&dose, DvhMetric::DoseAtVolumeCc { cc, voxel_cc: 0.008 }).unwrap();
        assert!((got - sorted_dose_at(&dose, cc / 0.008)).abs() <= 1e-9);
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(dvh_metric(&[], DvhMetric::Mean).is_err());
    assert!(dvh_metric(&[1.0], DvhMetric::DosePercent(0.0)).is_err());
    assert!(dvh_metric(&[1.0], DvhMetric::DosePercent(101.0)).is_err());
}

proptest! {
    #[test]
    fn dose_percent_is_monotone_in_p(dose in prop::collection::vec(0.0f64..70.0, 1..200), p in 1.0f64..99.0) {
        let a = dvh_metric(&dose, DvhMetric::DosePercent(p)).unwrap();
        let b = dvh_metric(&dose, DvhMetric::DosePercent(p + 1.0)).unwrap();
        prop_assert!(b <= a + 1e-12);
        let max = dose.iter().copied().fold(f64::MIN, f64::max);
        let min = dose.iter().copied().fold(f64::MAX, f64::min);
        prop_assert!(a <= max && a >= min);
    }
}
