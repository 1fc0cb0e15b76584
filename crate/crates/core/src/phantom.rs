//! Synthetic water phantoms with an analytic pencil-beam kernel.
//!
//! Coordinates are in mm with voxel `(i, j, k)` centred at
//! `((i + ½)s, (j + ½)s, (k + ½)s)` and linear index `(k·ny + j)·nx + i`.
//! Beams lie in the axial (x, y) plane and aim at the grid centre; gantry 0
//! travels along +y. Depth is measured from the plane perpendicular to the
//! beam that touches the grid's bounding box, i.e. every beam sees a
//! homogeneous water slab.
//!
//! Range–energy: `R[cm] = 0.0022·E^1.77` (Bragg–Kleeman, water).
//!
//! Depth dose for range `R` (mm):
//!
//! ```text
//! D(z) = 0.3·(1 + 0.6·z/R)·L(z) + exp(-(z - R)² / 2σ_r²)
//! L(z) = 1 / (1 + exp((z - R) / 0.6σ_r)),   σ_r = 1 + 0.012·R
//! ```
//!
//! Lateral profile: a normalised 2-D Gaussian whose σ grows linearly from
//! `sigma_surface_mm` at the surface to `sigma_bragg_mm` at the Bragg depth
//! and stays constant beyond it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ProblemError, Result};
use crate::matrix::DoseInfluenceMatrix;
use crate::plan_eval::{ClinicalGoalTable, TARGET_OVERDOSE_FACTOR};
use crate::problem::{ObjectiveComponent, ObjectiveKind, PlanProblem, SpotInfo, Structure, StructureKind};

pub const MIN_ENERGY_MEV: f64 = 70.0;
pub const MAX_ENERGY_MEV: f64 = 240.0;
pub const MIN_RX_GY: f64 = 4.0;
pub const MAX_RX_GY: f64 = 74.2;

/// Water range in mm for a proton energy in MeV.
pub fn range_mm(energy_mev: f64) -> f64 {
    10.0 * 0.0022 * energy_mev.powf(1.77)
}

/// Inverse of [`range_mm`].
pub fn energy_for_range(range_mm: f64) -> f64 {
    (range_mm / 10.0 / 0.0022).powf(1.0 / 1.77)
}

/// Relative depth dose at depth `z` for Bragg depth `range` (both mm).
pub fn depth_dose(z: f64, range: f64) -> f64 {
    let sigma_r = 1.0 + 0.012 * range;
    let falloff = 1.0 / (1.0 + ((z - range) / (0.6 * sigma_r)).exp());
    let plateau = 0.3 * (1.0 + 0.6 * z / range) * falloff;
    let peak = (-(z - range).powi(2) / (2.0 * sigma_r * sigma_r)).exp();
    plateau + peak
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing_mm: f64,
}

fn default_spacing() -> f64 {
    2.0
}

impl GridSpec {
    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn extent_mm(&self) -> [f64; 3] {
        self.dims.map(|d| d as f64 * self.spacing_mm)
    }

    pub fn center_mm(&self) -> [f64; 3] {
        self.extent_mm().map(|e| 0.5 * e)
    }

    pub fn voxel_center(&self, index: usize) -> [f64; 3] {
        let [nx, ny, _] = self.dims;
        let i = index % nx;
        let j = (index / nx) % ny;
        let k = index / (nx * ny);
        [i, j, k].map(|v| (v as f64 + 0.5) * self.spacing_mm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn sphere(center_mm: [f64; 3], radius_mm: f64) -> Self {
        Self {
            center_mm,
            radii_mm: [radius_mm; 3],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center_mm[a]) / self.radii_mm[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub rx: f64,
    /// Union of ellipsoids.
    pub shape: Vec<Ellipsoid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OarSpec {
    /// Must resolve in the clinical goals table.
    pub name: String,
    pub shape: Vec<Ellipsoid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    pub gantry_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    /// Absolute dose scale (Gy·mm²/MU) applied to the relative kernel.
    pub dose_scale: f64,
    pub spot_spacing_mm: f64,
    pub layer_spacing_mm: f64,
    pub target_margin_mm: f64,
    pub sigma_surface_mm: f64,
    pub sigma_bragg_mm: f64,
    /// Entries below this fraction of a spot's maximum are dropped.
    pub relative_cutoff: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            dose_scale: 2.5,
            spot_spacing_mm: 7.0,
            layer_spacing_mm: 7.0,
            target_margin_mm: 5.0,
            sigma_surface_mm: 3.0,
            sigma_bragg_mm: 6.0,
            relative_cutoff: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub oars: Vec<OarSpec>,
    pub beams: Vec<BeamSpec>,
    pub fractions: u32,
    /// Randomises the lateral lattice phase of each beam.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kernel: KernelParams,
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProblemError::Phantom(m));
        if self.grid.dims.iter().any(|&d| d == 0) || !(self.grid.spacing_mm > 0.0) {
            return bad("grid dimensions and spacing must be positive".into());
        }
        if self.grid.n_voxels() > u32::MAX as usize {
            return bad("grid too large".into());
        }
        if self.targets.is_empty() || self.targets.len() > 4 {
            return bad(format!("expected 1 to 4 targets, got {}", self.targets.len()));
        }
        if self.beams.is_empty() || self.beams.len() > 5 {
            return bad(format!("expected 1 to 5 beams, got {}", self.beams.len()));
        }
        if self.fractions == 0 {
            return bad("fractions must be at least 1".into());
        }
        let k = &self.kernel;
        if [k.dose_scale, k.spot_spacing_mm, k.layer_spacing_mm, k.sigma_surface_mm, k.sigma_bragg_mm]
            .iter()
            .any(|v| !(*v > 0.0))
            || !(k.target_margin_mm >= 0.0)
            || !(k.relative_cutoff >= 0.0 && k.relative_cutoff < 1.0)
        {
            return bad("kernel parameters out of range".into());
        }
        let extent = self.grid.extent_mm();
        let inside = |name: &str, shape: &[Ellipsoid]| -> Result<()> {
            if shape.is_empty() {
                return bad(format!("structure `{name}` has no shape"));
            }
            for e in shape {
                for a in 0..3 {
                    if !(e.radii_mm[a] > 0.0)
                        || e.center_mm[a] - e.radii_mm[a] < 0.0
                        || e.center_mm[a] + e.radii_mm[a] > extent[a]
                    {
                        return bad(format!("structure `{name}` does not lie inside the grid"));
                    }
                }
            }
            Ok(())
        };
        for t in &self.targets {
            if !(MIN_RX_GY..=MAX_RX_GY).contains(&t.rx) {
                return bad(format!("target `{}` prescription {} outside [4, 74.2] Gy", t.name, t.rx));
            }
            inside(&t.name, &t.shape)?;
        }
        let goals = ClinicalGoalTable::shipped();
        for o in &self.oars {
            if goals.lookup(&o.name).is_none() {
                return bad(format!("OAR `{}` is not in the clinical goals table", o.name));
            }
            inside(&o.name, &o.shape)?;
        }
        let mut names: Vec<&str> = self
            .targets
            .iter()
            .map(|t| t.name.as_str())
            .chain(self.oars.iter().map(|o| o.name.as_str()))
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("structure names must be unique".into());
        }
        Ok(())
    }
}

/// One pencil beam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedSpot {
    pub beam: u32,
    /// 0 is the most distal layer.
    pub layer: u32,
    pub row: i32,
    pub col: i32,
    /// Position in the beam's lateral plane (mm).
    pub lateral_mm: [f64; 2],
    /// Bragg depth in the phantom (mm).
    pub depth_mm: f64,
    pub energy_mev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamLayout {
    pub gantry_deg: f64,
    /// Water-equivalent thickness added upstream of the phantom so that
    /// shallow layers stay above the minimum energy.
    pub range_shifter_mm: f64,
    pub spots: Vec<PlacedSpot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotGrid {
    pub beams: Vec<BeamLayout>,
}

impl SpotGrid {
    pub fn n_spots(&self) -> usize {
        self.beams.iter().map(|b| b.spots.len()).sum()
    }

    pub fn spots(&self) -> impl Iterator<Item = (&BeamLayout, &PlacedSpot)> {
        self.beams.iter().flat_map(|b| b.spots.iter().map(move |s| (b, s)))
    }
}

/// Beam frame: unit direction `u`, lateral axes `e1`, `e2`, and the depth of
/// the grid centre.
#[derive(Clone, Copy, Debug)]
struct BeamFrame {
    origin: [f64; 3],
    u: [f64; 3],
    e1: [f64; 3],
    e2: [f64; 3],
    center_depth: f64,
}

impl BeamFrame {
    fn new(grid: &GridSpec, gantry_deg: f64) -> Self {
        let t = gantry_deg.to_radians();
        let (s, c) = t.sin_cos();
        let u = [s, c, 0.0];
        let extent = grid.extent_mm();
        Self {
            origin: grid.center_mm(),
            u,
            e1: [c, -s, 0.0],
            e2: [0.0, 0.0, 1.0],
            center_depth: 0.5 * (u[0].abs() * extent[0] + u[1].abs() * extent[1]),
        }
    }

    /// `(depth, lateral a, lateral b)`.
    fn project(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let dot = |v: [f64; 3]| d[0] * v[0] + d[1] * v[1] + d[2] * v[2];
        [dot(self.u) + self.center_depth, dot(self.e1), dot(self.e2)]
    }
}

/// Voxel index sets for targets then OARs, in spec order. Lower-dose targets
/// exclude voxels claimed by higher-dose targets.
pub fn structure_voxels(spec: &PhantomSpec) -> Result<Vec<Structure>> {
    let grid = &spec.grid;
    let collect = |shape: &[Ellipsoid]| -> Vec<u32> {
        // Scan only the bounding box of the union.
        let s = grid.spacing_mm;
        let [nx, ny, nz] = grid.dims;
        let mut out = Vec::new();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let dims = [nx, ny, nz];
        for e in shape {
            for a in 0..3 {
                let l = ((e.center_mm[a] - e.radii_mm[a]) / s - 0.5).floor().max(0.0) as usize;
                let h = (((e.center_mm[a] + e.radii_mm[a]) / s - 0.5).ceil() as usize).min(dims[a] - 1);
                lo[a] = lo[a].min(l);
                hi[a] = hi[a].max(h);
            }
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let p = [i, j, k].map(|v| (v as f64 + 0.5) * s);
                    if shape.iter().any(|e| e.contains(p)) {
                        out.push(((k * ny + j) * nx + i) as u32);
                    }
                }
            }
        }
        out
    };
    let mut structures = Vec::new();
    let mut order: Vec<usize> = (0..spec.targets.len()).collect();
    order.sort_by(|&a, &b| spec.targets[b].rx.total_cmp(&spec.targets[a].rx).then(a.cmp(&b)));
    let mut claimed = std::collections::HashSet::new();
    let mut target_sets = vec![Vec::new(); spec.targets.len()];
    for &t in &order {
        let voxels: Vec<u32> = collect(&spec.targets[t].shape)
            .into_iter()
            .filter(|v| !claimed.contains(v))
            .collect();
        claimed.extend(voxels.iter().copied());
        target_sets[t] = voxels;
    }
    for (t, voxels) in spec.targets.iter().zip(target_sets) {
        if voxels.is_empty() {
            return Err(ProblemError::Phantom(format!("target `{}` covers no voxels", t.name)));
        }
        structures.push(Structure::new(t.name.clone(), StructureKind::Target, voxels));
    }
    for o in &spec.oars {
        let voxels = collect(&o.shape);
        if voxels.is_empty() {
            return Err(ProblemError::Phantom(format!("OAR `{}` covers no voxels", o.name)));
        }
        structures.push(Structure::new(o.name.clone(), StructureKind::Oar, voxels));
    }
    Ok(structures)
}

/// Hexagonal spot lattice per energy layer, culled to the field-specific
/// target (all targets expanded by the margin).
pub fn place_spots(spec: &PhantomSpec) -> Result<SpotGrid> {
    spec.validate()?;
    let structures = structure_voxels(spec)?;
    let target_points: Vec<[f64; 3]> = structures
        .iter()
        .filter(|s| s.kind == StructureKind::Target)
        .flat_map(|s| s.voxels.iter().map(|&v| spec.grid.voxel_center(v as usize)))
        .collect();
    let k = &spec.kernel;
    let margin = k.target_margin_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_range = range_mm(MIN_ENERGY_MEV);
    let max_range = range_mm(MAX_ENERGY_MEV);
    let mut beams = Vec::with_capacity(spec.beams.len());
    for (b, beam) in spec.beams.iter().enumerate() {
        let frame = BeamFrame::new(&spec.grid, beam.gantry_deg);
        let pts: Vec<[f64; 3]> = target_points.iter().map(|&p| frame.project(p)).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let distal = hi[0] + margin;
        let proximal = (lo[0] - margin).max(0.0);
        if distal > max_range {
            return Err(ProblemError::Phantom(format!(
                "beam {b} (gantry {}°) needs {distal:.1} mm range, beyond the {MAX_ENERGY_MEV} MeV limit",
                beam.gantry_deg
            )));
        }
        let mut depths = Vec::new();
        let mut z = distal;
        while z >= proximal - 1e-9 {
            depths.push(z);
            z -= k.layer_spacing_mm;
        }
        let shallowest = depths.last().copied().unwrap_or(distal);
        let shifter = (min_range - shallowest).max(0.0);
        let phase = [rng.random::<f64>() * k.spot_spacing_mm, rng.random::<f64>() * k.spot_spacing_mm];
        let row_pitch = k.spot_spacing_mm * 3f64.sqrt() / 2.0;
        let (a_lo, a_hi) = (lo[1] - margin - k.spot_spacing_mm, hi[1] + margin + k.spot_spacing_mm);
        let (b_lo, b_hi) = (lo[2] - margin - row_pitch, hi[2] + margin + row_pitch);
        let row_range = ((b_lo - phase[1]) / row_pitch).floor() as i32..=((b_hi - phase[1]) / row_pitch).ceil() as i32;
        let col_range = ((a_lo - phase[0]) / k.spot_spacing_mm).floor() as i32 - 1
            ..=((a_hi - phase[0]) / k.spot_spacing_mm).ceil() as i32;
        let margin2 = margin * margin;
        let mut spots = Vec::new();
        for (layer, &depth) in depths.iter().enumerate() {
            let energy = energy_for_range(depth + shifter);
            for row in row_range.clone() {
                let bpos = phase[1] + row as f64 * row_pitch;
                let offset = if row.rem_euclid(2) == 1 { 0.5 * k.spot_spacing_mm } else { 0.0 };
                for col in col_range.clone() {
                    let apos = phase[0] + offset + col as f64 * k.spot_spacing_mm;
                    let q = [depth, apos, bpos];
                    let inside = pts.iter().any(|p| {
                        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2) <= margin2
                    });
                    if inside {
                        spots.push(PlacedSpot {
                            beam: b as u32,
                            layer: layer as u32,
                            row,
                            col,
                            lateral_mm: [apos, bpos],
                            depth_mm: depth,
                            energy_mev: energy,
                        });
                    }
                }
            }
        }
        beams.push(BeamLayout {
            gantry_deg: beam.gantry_deg,
            range_shifter_mm: shifter,
            spots,
        });
    }
    if beams.iter().all(|b| b.spots.is_empty()) {
        return Err(ProblemError::Phantom("no spots survive culling".into()));
    }
    Ok(SpotGrid { beams })
}

/// Dose per MU of one spot at a point given in its beam frame.
fn spot_dose(k: &KernelParams, spot: &PlacedSpot, shifter: f64, q: [f64; 3]) -> f64 {
    let range = spot.depth_mm + shifter;
    let z = q[0] + shifter;
    let sigma = k.sigma_surface_mm + (k.sigma_bragg_mm - k.sigma_surface_mm) * (z / range).clamp(0.0, 1.0);
    let r2 = (q[1] - spot.lateral_mm[0]).powi(2) + (q[2] - spot.lateral_mm[1]).powi(2);
    let lateral = (-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma);
    k.dose_scale * depth_dose(z, range) * lateral
}

/// Influence matrix over the full grid; rows exist only for voxels that
/// belong to some structure.
pub fn build_influence(spec: &PhantomSpec, grid: &SpotGrid) -> Result<DoseInfluenceMatrix> {
    let structures = structure_voxels(spec)?;
    let mut rows: Vec<u32> = structures.iter().flat_map(|s| s.voxels.iter().copied()).collect();
    rows.sort_unstable();
    rows.dedup();
    let frames: Vec<BeamFrame> = grid.beams.iter().map(|b| BeamFrame::new(&spec.grid, b.gantry_deg)).collect();
    let projected: Vec<Vec<[f64; 3]>> = frames
        .iter()
        .map(|f| rows.iter().map(|&v| f.project(spec.grid.voxel_center(v as usize))).collect())
        .collect();
    let spots: Vec<(usize, f64, PlacedSpot)> = grid
        .beams
        .iter()
        .enumerate()
        .flat_map(|(b, layout)| layout.spots.iter().map(move |s| (b, layout.range_shifter_mm, *s)))
        .collect();
    let k = &spec.kernel;
    let columns: Vec<Vec<(u32, f64)>> = spots
        .par_iter()
        .map(|&(b, shifter, spot)| {
            let col: Vec<(u32, f64)> = rows
                .iter()
                .zip(&projected[b])
                .map(|(&v, &q)| (v, spot_dose(k, &spot, shifter, q)))
                .collect();
            let max = col.iter().fold(0.0f64, |m, e| m.max(e.1));
            let cut = max * k.relative_cutoff;
            col.into_iter().filter(|e| e.1 > 0.0 && e.1 >= cut).collect()
        })
        .collect();
    let mut triplets = Vec::with_capacity(columns.iter().map(Vec::len).sum());
    for (j, col) in columns.into_iter().enumerate() {
        triplets.extend(col.into_iter().map(|(v, val)| (v, j as u32, val)));
    }
    DoseInfluenceMatrix::from_triplets(spec.grid.n_voxels(), spots.len(), triplets)
}

/// Full problem: structures, influence matrix, default objectives
/// (Dmin at Rx and Dmax at 1.05·Rx_max per target, the table objective per
/// OAR, all with weight 1) and spot metadata.
pub fn generate_problem(spec: &PhantomSpec) -> Result<PlanProblem> {
    let grid = place_spots(spec)?;
    let matrix = build_influence(spec, &grid)?;
    let structures = structure_voxels(spec)?;
    let goals = ClinicalGoalTable::shipped();
    let rx_max = spec.targets.iter().map(|t| t.rx).fold(f64::NEG_INFINITY, f64::max);
    let mut objectives = Vec::new();
    for (i, t) in spec.targets.iter().enumerate() {
        objectives.push(ObjectiveComponent { structure: i, kind: ObjectiveKind::DMin, weight: 1.0, dose_limit: t.rx });
        objectives.push(ObjectiveComponent {
            structure: i,
            kind: ObjectiveKind::DMax,
            weight: 1.0,
            dose_limit: TARGET_OVERDOSE_FACTOR * rx_max,
        });
    }
    for (j, o) in spec.oars.iter().enumerate() {
        let goal = goals
            .lookup(&o.name)
            .ok_or_else(|| ProblemError::Phantom(format!("OAR `{}` is not in the clinical goals table", o.name)))?;
        objectives.push(ObjectiveComponent {
            structure: spec.targets.len() + j,
            kind: goal.kind,
            weight: 1.0,
            dose_limit: goal.d_clinic,
        });
    }
    let mut problem = PlanProblem::new(matrix, structures, objectives, spec.fractions)?;
    problem.prescriptions = spec.targets.iter().map(|t| (t.name.clone(), t.rx)).collect::<BTreeMap<_, _>>();
    problem.spots = grid
        .spots()
        .map(|(_, s)| SpotInfo { beam: s.beam, layer: s.layer, row: s.row, col: s.col, energy_mev: s.energy_mev })
        .collect();
    problem.voxel_volume_cc = (spec.grid.spacing_mm / 10.0).powi(3);
    problem.validate()?;
    Ok(problem)
}

/// Distribution of random training/test phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSampler {
    pub grid_dims: [usize; 3],
    pub spacing_mm: f64,
    pub max_objectives: usize,
    pub max_targets: usize,
    pub min_oars: usize,
    pub max_oars: usize,
    pub beams: [usize; 2],
    pub target_radius_mm: [f64; 2],
    pub oar_radius_mm: [f64; 2],
    pub fractions: Vec<u32>,
}

impl Default for PhantomSampler {
    fn default() -> Self {
        Self {
            grid_dims: [48, 48, 28],
            spacing_mm: 2.0,
            max_objectives: 12,
            max_targets: 2,
            min_oars: 2,
            max_oars: 6,
            beams: [2, 4],
            target_radius_mm: [12.0, 17.0],
            oar_radius_mm: [4.0, 9.0],
            fractions: vec![1, 5, 30],
        }
    }
}

impl PhantomSampler {
    /// Draws a spec; the same seed always yields the same spec.
    pub fn sample(&self, seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11_u64);
        let grid = GridSpec { dims: self.grid_dims, spacing_mm: self.spacing_mm };
        let extent = grid.extent_mm();
        let center = grid.center_mm();
        let fractions = self.fractions[rng.random_range(0..self.fractions.len())];
        let rx_main = match fractions {
            1 => rng.random_range(8.0..20.0),
            f if f <= 5 => rng.random_range(25.0..40.0),
            _ => rng.random_range(54.0..MAX_RX_GY),
        };
        let n_targets = rng.random_range(1..=self.max_targets.clamp(1, 4));
        let fit = |c: [f64; 3], r: [f64; 3]| -> [f64; 3] {
            let mut out = c;
            for a in 0..3 {
                out[a] = c[a].clamp(r[a] + 0.5, extent[a] - r[a] - 0.5);
            }
            out
        };
        let [r_lo, r_hi] = self.target_radius_mm;
        let main_r = [
            rng.random_range(r_lo..r_hi),
            rng.random_range(r_lo..r_hi),
            rng.random_range(r_lo..r_hi).min(0.5 * extent[2] - 2.0),
        ];
        let jitter = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), 0.0];
        let main_c = fit([center[0] + jitter[0], center[1] + jitter[1], center[2]], main_r);
        let mut targets = vec![TargetSpec {
            name: "CTV_high".into(),
            rx: rx_main,
            shape: vec![Ellipsoid { center_mm: main_c, radii_mm: main_r }],
        }];
        if n_targets > 1 {
            let r = main_r.map(|v| 0.8 * v);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let d = 0.8 * main_r[0];
            let c = fit([main_c[0] + d * angle.cos(), main_c[1] + d * angle.sin(), main_c[2]], r);
            targets.push(TargetSpec {
                name: "CTV_low".into(),
                rx: (rx_main * rng.random_range(0.8..0.95)).max(MIN_RX_GY),
                shape: vec![Ellipsoid { center_mm: c, radii_mm: r }],
            });
        }
        let oar_cap = self.max_objectives.saturating_sub(2 * targets.len()).min(self.max_oars);
        let n_oars = if oar_cap <= self.min_oars { oar_cap } else { rng.random_range(self.min_oars..=oar_cap) };
        let mut names: Vec<String> = ClinicalGoalTable::shipped().goals.iter().map(|g| g.name.clone()).collect();
        names.shuffle(&mut rng);
        let [o_lo, o_hi] = self.oar_radius_mm;
        let oars = names
            .into_iter()
            .take(n_oars)
            .map(|name| {
                let r = [
                    rng.random_range(o_lo..o_hi),
                    rng.random_range(o_lo..o_hi),
                    rng.random_range(o_lo..o_hi),
                ];
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let gap = rng.random_range(-3.0..5.0);
                let d = 0.5 * (main_r[0] + main_r[1]) + r[0] + gap;
                let dz = rng.random_range(-0.5..0.5) * main_r[2];
                let c = fit([main_c[0] + d * angle.cos(), main_c[1] + d * angle.sin(), main_c[2] + dz], r);
                OarSpec { name, shape: vec![Ellipsoid { center_mm: c, radii_mm: r }] }
            })
            .collect();
        let n_beams = rng.random_range(self.beams[0]..=self.beams[1]);
        let start = rng.random_range(0.0..360.0);
        let beams = (0..n_beams)
            .map(|b| BeamSpec { gantry_deg: (start + 360.0 * b as f64 / n_beams as f64) % 360.0 })
            .collect();
        PhantomSpec { grid, targets, oars, beams, fractions, seed, kernel: KernelParams::default() }
    }

    pub fn generate(&self, seed: u64) -> Result<PlanProblem> {
        generate_problem(&self.sample(seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_spec(depth_center_mm: f64) -> PhantomSpec {
        PhantomSpec {
            grid: GridSpec { dims: [40, 60, 24], spacing_mm: 2.0 },
            targets: vec![TargetSpec {
                name: "CTV".into(),
                rx: 60.0,
                shape: vec![Ellipsoid::sphere([40.0, depth_center_mm, 24.0], 14.0)],
            }],
            oars: vec![],
            beams: vec![BeamSpec { gantry_deg: 0.0 }],
            fractions: 30,
            seed: 3,
            kernel: KernelParams::default(),
        }
    }

    #[test]
    fn range_energy_is_monotone_and_invertible() {
        let mut last = 0.0;
        for e in (70..=240).step_by(10) {
            let r = range_mm(e as f64);
            assert!(r > last);
            last = r;
            assert!((energy_for_range(r) - e as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_needs_at_least_five_layers() {
        let grid = place_spots(&sphere_spec(80.0)).unwrap();
        let layers = grid.beams[0].spots.iter().map(|s| s.layer).max().unwrap() + 1;
        assert!(layers >= 5, "{layers}");
        assert!(grid.spots().all(|(_, s)| (MIN_ENERGY_MEV..=MAX_ENERGY_MEV).contains(&s.energy_mev)));
    }

    #[test]
    fn shallow_target_uses_range_shifter() {
        let grid = place_spots(&sphere_spec(16.0)).unwrap();
        assert!(grid.beams[0].range_shifter_mm > 0.0);
        let min_e = grid.spots().map(|(_, s)| s.energy_mev).fold(f64::INFINITY, f64::min);
        assert!((min_e - MIN_ENERGY_MEV).abs() < 1e-9);
    }

    #[test]
    fn too_deep_target_names_beam() {
        let mut spec = sphere_spec(80.0);
        spec.grid.dims = [40, 220, 24];
        spec.targets[0].shape = vec![Ellipsoid::sphere([40.0, 420.0, 24.0], 10.0)];
        spec.beams = vec![BeamSpec { gantry_deg: 90.0 }, BeamSpec { gantry_deg: 0.0 }];
        let err = place_spots(&spec).unwrap_err().to_string();
        assert!(err.contains("beam 1"), "{err}");
    }

    #[test]
    fn lattice_spacing_is_exact() {
        let grid = place_spots(&sphere_spec(80.0)).unwrap();
        let layer0: Vec<_> = grid.beams[0].spots.iter().filter(|s| s.layer == 2).collect();
        let mut nearest = f64::INFINITY;
        for (i, a) in layer0.iter().enumerate() {
            for b in &layer0[i + 1..] {
                let d = ((a.lateral_mm[0] - b.lateral_mm[0]).powi(2) + (a.lateral_mm[1] - b.lateral_mm[1]).powi(2)).sqrt();
                nearest = nearest.min(d);
            }
        }
        assert!((nearest - 7.0).abs() < 1e-9, "{nearest}");
    }

    #[test]
    fn lateral_three_sigma_bound() {
        let k = KernelParams::default();
        let spot = PlacedSpot { beam: 0, layer: 0, row: 0, col: 0, lateral_mm: [0.0, 0.0], depth_mm: 100.0, energy_mev: 0.0 };
        let z = 60.0;
        let sigma = 3.0 + 3.0 * z / 100.0;
        let axis = spot_dose(&k, &spot, 0.0, [z, 0.0, 0.0]);
        let off = spot_dose(&k, &spot, 0.0, [z, 3.0 * sigma, 0.0]);
        assert!(off <= (-4.5f64).exp() * axis * (1.0 + 1e-12));
    }

    #[test]
    fn depth_dose_peaks_near_range() {
        for e in [70.0, 120.0, 180.0, 240.0] {
            let r = range_mm(e);
            let mut best = (0.0, f64::NEG_INFINITY);
            let mut z = 0.0;
            while z < r + 30.0 {
                let d = depth_dose(z, r);
                if d > best.1 {
                    best = (z, d);
                }
                z += 0.01;
            }
            assert!((best.0 - r).abs() <= 2.0, "E={e}: peak {} vs {r}", best.0);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = PhantomSampler::default().sample(11);
        assert_eq!(place_spots(&spec).unwrap(), place_spots(&spec).unwrap());
        assert_eq!(spec, PhantomSampler::default().sample(11));
    }

    #[test]
    fn unknown_oar_rejected() {
        let mut spec = sphere_spec(80.0);
        spec.oars.push(OarSpec { name: "Spleen".into(), shape: vec![Ellipsoid::sphere([40.0, 40.0, 24.0], 4.0)] });
        assert!(spec.validate().is_err());
    }
}
