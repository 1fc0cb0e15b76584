//! Virtual planner around the inverse optimizers, and benchmark protocols
//! comparing the learned optimizer with L-BFGS-B.

pub mod action;
pub mod bench;
pub mod episode;
pub mod error;
pub mod init;
pub mod mlp;
pub mod ppo;
pub mod rule;

pub use action::AdjustmentAction;
pub use episode::{run_episode, EpisodeConfig, EpisodeRecord, IdentityPolicy, InnerConfig, InnerOptimizer, Policy, RulePolicy};
pub use error::{AutoplanError, Result};
pub use init::{init_objectives, ObjectiveParams};
pub use rule::{rule_based_adjust, RuleConfig};

pub const SEED_ENV: &str = "AUTOPLAN_SEED";

/// Global seed from `AUTOPLAN_SEED`, or `default` when unset.
pub fn global_seed(default: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| AutoplanError::Config(format!("{SEED_ENV}=`{v}` is not an integer"))),
        Err(_) => Ok(default),
    }
}
