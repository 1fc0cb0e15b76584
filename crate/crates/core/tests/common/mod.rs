#![allow(dead_code)]

use pbs_core::matrix::DoseInfluenceMatrix;
use pbs_core::problem::{ObjectiveComponent, ObjectiveKind, PlanProblem, Structure, StructureKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random problem together with its dense row-major matrix.
pub struct SmallProblem {
    pub problem: PlanProblem,
    pub dense: Vec<f64>,
    pub x: Vec<f64>,
}

pub fn small_problem(seed: u64, max_voxels: usize, max_spots: usize) -> SmallProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = rng.random_range(4..=max_voxels);
    let ns = rng.random_range(2..=max_spots);
    let dense: Vec<f64> = (0..nv * ns)
        .map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random_range(0.0..0.2) })
        .collect();
    let matrix = DoseInfluenceMatrix::from_dense(nv, ns, &dense).unwrap();
    let n_struct = rng.random_range(1..=3usize);
    let structures: Vec<Structure> = (0..n_struct)
        .map(|s| {
            let mut voxels: Vec<u32> = (0..nv as u32).filter(|_| rng.random::<f64>() < 0.5).collect();
            if voxels.is_empty() {
                voxels.push(rng.random_range(0..nv as u32));
            }
            let kind = if s == 0 { StructureKind::Target } else { StructureKind::Oar };
            Structure::new(format!("S{s}"), kind, voxels)
        })
        .collect();
    let n_obj = rng.random_range(1..=5usize);
    let objectives = (0..n_obj)
        .map(|_| ObjectiveComponent {
            structure: rng.random_range(0..n_struct),
            kind: [ObjectiveKind::DMax, ObjectiveKind::DMin, ObjectiveKind::DMean][rng.random_range(0..3)],
            weight: rng.random_range(0.1..5.0),
            dose_limit: rng.random_range(0.5..3.0),
        })
        .collect();
    let problem = PlanProblem::new(matrix, structures, objectives, 1).unwrap();
    let x = (0..ns).map(|_| rng.random_range(0.0..20.0)).collect();
    SmallProblem { problem, dense, x }
}

/// Straightforward dense evaluation: `(loss, component losses, gradient,
/// split gradients [spot][component])`.
pub fn dense_oracle(sp: &SmallProblem, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let p = &sp.problem;
    let (nv, ns) = (p.n_voxels(), p.n_spots());
    let dose: Vec<f64> = (0..nv).map(|i| (0..ns).map(|j| sp.dense[i * ns + j] * x[j]).sum()).collect();
    let k = p.objectives.len();
    let mut comps = vec![0.0; k];
    let mut split = vec![vec![0.0; k]; ns];
    for (c, o) in p.objectives.iter().enumerate() {
        let vox = &p.structures[o.structure].voxels;
        let n = vox.len() as f64;
        let mut dloss_ddose = vec![0.0; nv];
        match o.kind {
            ObjectiveKind::DMax | ObjectiveKind::DMin => {
                for &v in vox {
                    let d = dose[v as usize] - o.dose_limit;
                    let r = if o.kind == ObjectiveKind::DMax { d.max(0.0) } else { d.min(0.0) };
                    comps[c] += o.weight * r * r / n;
                    dloss_ddose[v as usize] += 2.0 * o.weight * r / n;
                }
            }
            ObjectiveKind::DMean => {
                let mean: f64 = vox.iter().map(|&v| dose[v as usize]).sum::<f64>() / n;
                let r = (mean - o.dose_limit).max(0.0);
                comps[c] = o.weight * r * r;
                for &v in vox {
                    dloss_ddose[v as usize] += 2.0 * o.weight * r / n;
                }
            }
        }
        for j in 0..ns {
            split[j][c] = (0..nv).map(|i| sp.dense[i * ns + j] * dloss_ddose[i]).sum();
        }
    }
    let grad = split.iter().map(|row| row.iter().sum()).collect();
    (comps.iter().sum(), comps, grad, split)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}
