//! Fixed mapping from a problem's objectives to the network's split-gradient
//! channels.
//!
//! | slots   | meaning                                                        |
//! |---------|----------------------------------------------------------------|
//! | 0..8    | targets ranked by prescription (highest first): `2r` = Dmin, `2r+1` = Dmax of target `r` |
//! | 8..40   | one slot per clinical-goal row, in table order (first objective on a structure resolving to that row) |
//! | 40..58  | overflow, in objective order                                   |
//!
//! Unused slots stay zero. A problem that needs more than the overflow slots
//! is rejected.

use pbs_core::plan_eval::ClinicalGoalTable;
use pbs_core::problem::{ObjectiveKind, PlanProblem, StructureKind};
use serde::{Deserialize, Serialize};

use crate::error::{L2oError, Result};

pub const N_SLOTS: usize = 58;
pub const TARGET_SLOTS: usize = 8;
pub const GOAL_SLOTS: usize = 32;
pub const OVERFLOW_START: usize = TARGET_SLOTS + GOAL_SLOTS;

/// Description of the layout stored alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayoutInfo {
    pub n_slots: usize,
    pub target_slots: usize,
    pub goal_slots: usize,
    pub goal_names: Vec<String>,
}

impl SlotLayoutInfo {
    pub fn standard() -> Self {
        Self {
            n_slots: N_SLOTS,
            target_slots: TARGET_SLOTS,
            goal_slots: GOAL_SLOTS,
            goal_names: ClinicalGoalTable::shipped().goals.iter().map(|g| g.name.clone()).collect(),
        }
    }
}

/// Slot index for every objective of `problem`, in objective order.
pub fn assign_slots(problem: &PlanProblem) -> Result<Vec<usize>> {
    let goals = ClinicalGoalTable::shipped();
    let mut targets: Vec<(f64, &str, usize)> = problem
        .structures
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == StructureKind::Target)
        .map(|(i, s)| (problem.prescriptions.get(&s.name).copied().unwrap_or(0.0), s.name.as_str(), i))
        .collect();
    targets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    let target_rank = |structure: usize| targets.iter().position(|t| t.2 == structure);

    let mut used = [false; N_SLOTS];
    let mut slots = vec![usize::MAX; problem.objectives.len()];
    for (k, o) in problem.objectives.iter().enumerate() {
        let s = &problem.structures[o.structure];
        let preferred = match s.kind {
            StructureKind::Target => target_rank(o.structure).and_then(|r| {
                let offset = match o.kind {
                    ObjectiveKind::DMin => Some(0),
                    ObjectiveKind::DMax => Some(1),
                    ObjectiveKind::DMean => None,
                }?;
                (2 * r + offset < TARGET_SLOTS).then_some(2 * r + offset)
            }),
            _ => goals.lookup_index(&s.name).filter(|&r| r < GOAL_SLOTS).map(|r| TARGET_SLOTS + r),
        };
        if let Some(slot) = preferred.filter(|&p| !used[p]) {
            used[slot] = true;
            slots[k] = slot;
        }
    }
    let mut next = OVERFLOW_START;
    for slot in slots.iter_mut().filter(|s| **s == usize::MAX) {
        if next >= N_SLOTS {
            return Err(L2oError::Layout(format!(
                "problem has {} objectives that do not fit the {N_SLOTS}-slot layout",
                problem.objectives.len()
            )));
        }
        *slot = next;
        next += 1;
    }
    Ok(slots)
}
