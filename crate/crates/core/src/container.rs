//! `planprob/1` problem container.
//!
//! A directory holding `header.json` plus three little-endian arrays for the
//! row-compressed matrix: `row_offsets.u64`, `col_indices.u32`,
//! `values.f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ProblemError, Result};
use crate::matrix::DoseInfluenceMatrix;
use crate::problem::{ObjectiveKind, PlanProblem, SpotInfo, Structure};

pub const CONTAINER_VERSION: &str = "planprob/1";
pub const HEADER_FILE: &str = "header.json";
pub const ROW_OFFSETS_FILE: &str = "row_offsets.u64";
pub const COL_INDICES_FILE: &str = "col_indices.u32";
pub const VALUES_FILE: &str = "values.f64";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    n_voxels: usize,
    n_spots: usize,
    nnz: usize,
    fractions: u32,
    mu_bounds_per_fraction: [f64; 2],
    voxel_volume_cc: f64,
    structures: Vec<Structure>,
    objectives: Vec<ObjectiveEntry>,
    prescriptions: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    spots: Vec<SpotInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectiveEntry {
    structure: String,
    kind: ObjectiveKind,
    weight: f64,
    dose_limit: f64,
}

fn container_err(path: &Path, reason: impl Into<String>) -> ProblemError {
    ProblemError::Container {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_problem(problem: &PlanProblem, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let m = &problem.matrix;
    let header = Header {
        version: CONTAINER_VERSION.to_string(),
        n_voxels: m.n_voxels(),
        n_spots: m.n_spots(),
        nnz: m.nnz(),
        fractions: problem.fractions,
        mu_bounds_per_fraction: [problem.mu_bounds_per_fraction.0, problem.mu_bounds_per_fraction.1],
        voxel_volume_cc: problem.voxel_volume_cc,
        structures: problem.structures.clone(),
        objectives: problem
            .objectives
            .iter()
            .map(|o| ObjectiveEntry {
                structure: problem.structures[o.structure].name.clone(),
                kind: o.kind,
                weight: o.weight,
                dose_limit: o.dose_limit,
            })
            .collect(),
        prescriptions: problem.prescriptions.clone(),
        spots: problem.spots.clone(),
    };
    fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(&header)?)?;
    fs::write(
        dir.join(ROW_OFFSETS_FILE),
        m.row_offsets().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
    )?;
    fs::write(
        dir.join(COL_INDICES_FILE),
        m.col_indices().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
    )?;
    fs::write(
        dir.join(VALUES_FILE),
        m.values().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
    )?;
    Ok(())
}

fn read_array<const W: usize, T>(path: &Path, expected: usize, decode: fn([u8; W]) -> T) -> Result<Vec<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * W {
        return Err(container_err(
            path,
            format!("expected {} bytes, found {}", expected * W, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(W)
        .map(|c| decode(c.try_into().expect("chunk width")))
        .collect())
}

pub fn load_problem(dir: impl AsRef<Path>) -> Result<PlanProblem> {
    let dir = dir.as_ref();
    let header_path = dir.join(HEADER_FILE);
    let header: Header = serde_json::from_str(&fs::read_to_string(&header_path)?)?;
    if header.version != CONTAINER_VERSION {
        return Err(container_err(
            &header_path,
            format!("unsupported version `{}`", header.version),
        ));
    }
    let row_offsets = read_array(&dir.join(ROW_OFFSETS_FILE), header.n_voxels + 1, u64::from_le_bytes)?;
    let col_indices = read_array(&dir.join(COL_INDICES_FILE), header.nnz, u32::from_le_bytes)?;
    let values = read_array(&dir.join(VALUES_FILE), header.nnz, f64::from_le_bytes)?;
    let matrix = DoseInfluenceMatrix::from_csr(header.n_voxels, header.n_spots, row_offsets, col_indices, values)?;

    let mut objectives = Vec::with_capacity(header.objectives.len());
    for o in header.objectives {
        let structure = header
            .structures
            .iter()
            .position(|s| s.name == o.structure)
            .ok_or_else(|| container_err(&header_path, format!("objective names unknown structure `{}`", o.structure)))?;
        objectives.push(crate::problem::ObjectiveComponent {
            structure,
            kind: o.kind,
            weight: o.weight,
            dose_limit: o.dose_limit,
        });
    }
    let problem = PlanProblem {
        matrix: Arc::new(matrix),
        structures: header.structures,
        objectives,
        fractions: header.fractions,
        mu_bounds_per_fraction: (header.mu_bounds_per_fraction[0], header.mu_bounds_per_fraction[1]),
        prescriptions: header.prescriptions,
        spots: header.spots,
        voxel_volume_cc: header.voxel_volume_cc,
    };
    problem.validate()?;
    Ok(problem)
}

/// Problem directories directly under `root` (those holding a header),
/// sorted by path.
pub fn list_problem_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.join(HEADER_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(HEADER_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Spot MU vectors are stored as a JSON array of numbers.
pub fn save_spot_vector(x: &[f64], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string(x)?)?;
    Ok(())
}

pub fn load_spot_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ObjectiveComponent, StructureKind};

    #[test]
    fn roundtrip_small_problem() {
        let m = DoseInfluenceMatrix::from_dense(3, 2, &[1.0, 0.0, 0.5, 0.25, 0.0, 2.0]).unwrap();
        let mut p = PlanProblem::new(
            m,
            vec![
                Structure::new("ctv", StructureKind::Target, vec![0, 1]),
                Structure::new("SpinalCord", StructureKind::Oar, vec![2]),
            ],
            vec![
                ObjectiveComponent { structure: 0, kind: ObjectiveKind::DMin, weight: 1.0, dose_limit: 60.0 },
                ObjectiveComponent { structure: 1, kind: ObjectiveKind::DMax, weight: 2.0, dose_limit: 45.0 },
            ],
            30,
        )
        .unwrap()
        .with_prescription("ctv", 60.0)
        .unwrap();
        p.spots = vec![
            SpotInfo { beam: 0, layer: 1, row: 0, col: 0, energy_mev: 100.0 },
            SpotInfo { beam: 0, layer: 0, row: 0, col: 1, energy_mev: 110.0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        save_problem(&p, dir.path()).unwrap();
        let q = load_problem(dir.path()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_wrong_version_and_truncated_arrays() {
        let p = PlanProblem::new(
            DoseInfluenceMatrix::identity(2),
            vec![Structure::new("a", StructureKind::Oar, vec![0])],
            vec![ObjectiveComponent { structure: 0, kind: ObjectiveKind::DMax, weight: 1.0, dose_limit: 1.0 }],
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_problem(&p, dir.path()).unwrap();
        fs::write(dir.path().join(VALUES_FILE), [0u8; 3]).unwrap();
        assert!(load_problem(dir.path()).is_err());

        save_problem(&p, dir.path()).unwrap();
        let header = fs::read_to_string(dir.path().join(HEADER_FILE)).unwrap();
        fs::write(dir.path().join(HEADER_FILE), header.replace("planprob/1", "planprob/9")).unwrap();
        assert!(matches!(load_problem(dir.path()), Err(ProblemError::Container { .. })));
    }
}
