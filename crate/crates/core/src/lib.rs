//! Proton PBS inverse-planning problems: sparse dose-influence matrices,
//! the one-sided quadratic penalty objective, synthetic phantoms, a
//! bound-constrained L-BFGS baseline and plan-quality scoring.

pub mod container;
pub mod error;
pub mod lbfgsb;
pub mod matrix;
pub mod phantom;
pub mod plan_eval;
pub mod problem;
pub mod trace;

pub use error::{ProblemError, Result};
pub use lbfgsb::{minimize, Bounds, LbfgsbOptions, Objective, QuasiNewtonHistory};
pub use matrix::DoseInfluenceMatrix;
pub use phantom::{generate_problem, PhantomSampler, PhantomSpec};
pub use plan_eval::{plan_score, ClinicalGoalTable, DoseInterval, PlanReport};
pub use problem::{ObjectiveComponent, ObjectiveKind, PlanProblem, Structure, StructureKind};
pub use trace::{Budget, RunTrace, Termination, TraceEntry};
