//! Core library for training and evaluating tool-calling agents that repair
//! their own failed calls through an explicit, tagged reflection step.
//!
//! The crate is organized around the data flow of such a system:
//!
//! - [`trajectory`]: multi-turn dialog model and a strict parser for tagged
//!   assistant completions (`<reflect>`, `<call>`, `<final>`), plus canonical
//!   call serialization and order-invariant call-multiset equality.
//! - [`similarity`]: pluggable text similarity in `[0, 1]` (token F1,
//!   normalized edit distance, or an external scorer process).
//! - [`reward`]: the multi-component reward with per-part scores, presence-mask
//!   normalization, structural penalties, format factor, and the similarity
//!   backoff branch.
//! - [`rlkernel`]: group-relative advantages, dynamic group filtering,
//!   sequence-level importance ratios, and the asymmetrically clipped
//!   surrogate objective, computed over externally supplied rewards and
//!   per-token log-probabilities.
//! - [`schema`]: tool-schema registry and a mock executor used as the
//!   executability oracle for perturbed and repaired calls.
//! - [`perturb`]: the benchmark construction pipeline with four perturbation
//!   operators, deterministic error-feedback synthesis, reflection templates,
//!   item packaging, and retention checks.
//! - [`evalmetrics`]: the repair-rate metric over multi-attempt records.
//! - [`synth`]: seeded generation of synthetic tool registries and clean
//!   trajectories for tests and demos.
//!
//! All numeric kernels are generic over the scalar type via [`Real`]
//! (`f32` or `f64`); `f64` is the default, and concrete aliases live at the
//! crate root.

pub mod evalmetrics;
pub mod external;
pub mod jsonl;
pub mod perturb;
pub mod reward;
pub mod rlkernel;
pub mod schema;
pub mod similarity;
pub mod synth;
pub mod trajectory;

use std::fmt;

/// Scalar type for the numeric kernels: `f32` or `f64`.
///
/// Blanket-implemented for any float that also supports primitive
/// conversions, so downstream code can stay generic without naming
/// `num_traits` bounds everywhere.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Converts a finite `f64` constant (e.g. a config default) into `Self`.
    fn from_f64_const(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 constant converts to scalar")
    }

    /// Converts a count into `Self`.
    fn from_count(v: usize) -> Self {
        num_traits::FromPrimitive::from_usize(v).expect("count converts to scalar")
    }
}

impl<T> Real for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + fmt::Debug
        + fmt::Display
        + Send
        + Sync
        + 'static
{
}

pub use evalmetrics::{attempt_success, repair_at_n, AttemptRecord};
pub use perturb::{BenchItem, Operator, PerturbationSpec};
pub use reward::{RewardBranch, RewardBreakdown, RewardConfig, Rewarder};
pub use rlkernel::{GroupDecision, GroupEvaluation, GroupStatus, RlConfig, RolloutGroup};
pub use schema::{ExecReport, SchemaRegistry, ToolSchema};
pub use similarity::{sim, Scorer, SimilarityKind};
pub use trajectory::{
    canonicalize_call, equal_calls, parse_completion, Message, ParsedCompletion, Role, ToolCall,
    Trajectory,
};

/// `f32` reward configuration.
pub type RewardConfig32 = reward::RewardConfig<f32>;
/// `f64` reward configuration (the default scalar).
pub type RewardConfig64 = reward::RewardConfig<f64>;
/// `f32` reward breakdown.
pub type RewardBreakdown32 = reward::RewardBreakdown<f32>;
/// `f64` reward breakdown (the default scalar).
pub type RewardBreakdown64 = reward::RewardBreakdown<f64>;
/// `f32` RL kernel configuration.
pub type RlConfig32 = rlkernel::RlConfig<f32>;
/// `f64` RL kernel configuration (the default scalar).
pub type RlConfig64 = rlkernel::RlConfig<f64>;
/// `f32` rollout group.
pub type RolloutGroup32 = rlkernel::RolloutGroup<f32>;
/// `f64` rollout group (the default scalar).
pub type RolloutGroup64 = rlkernel::RolloutGroup<f64>;
