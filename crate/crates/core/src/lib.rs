//! Hölder-mean aggregation of token importance ratios for group-relative
//! policy optimization, with a desk-scale training environment and a
//! numerical check harness for the aggregation's analytic properties.

pub mod analysis;
pub mod error;
pub mod holder;
pub mod objectives;
pub mod schedule;
pub mod sim;
pub mod verify;

/// Library version, recorded in every emitted artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{DomainError, Result};
pub use holder::{
    entropy_p_derivative, gradient_weights, hhi, holder_mean, holder_mean_masked, limit_weights,
    log_holder_mean, mu_p_derivative, shannon_entropy, weight_p_derivative, weighted_log_mean,
    HolderOrder, LimitDirection, LogRatioSequence, RatioSequence, WeightDistribution,
};
pub use objectives::{ClipConfig, ClipRegime, GroupBatch, RolloutRecord, StdKind};
pub use schedule::{p_at, ScheduleDirection, ScheduleShape, ScheduleSpec};
pub use sim::{train, PolicyParams, RunLog, TaskSpec, TrainConfig, TrainError};
