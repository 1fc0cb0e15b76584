//! Transformer learned optimizer for spot MU optimization.

pub mod adamw;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod meta;
pub mod network;
pub mod optimizer;
pub mod slots;
pub mod tape;

pub use error::{L2oError, Result};
pub use meta::{meta_loss, train, weight_schedule, MetaConfig, TrainOutcome};
pub use network::{L2OConfig, L2ONetwork};
pub use optimizer::{l2o_minimize, L2OOptions};
