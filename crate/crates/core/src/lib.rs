//! Token-level advantage shaping for group-relative policy optimization.
//!
//! The crate is organised bottom-up:
//!
//! - [`rollout`]: domain types for rollout groups, shaping configuration and
//!   advantage outputs, plus their JSONL wire formats.
//! - [`advantage`]: the GRPO baseline advantage and the entropy-gated,
//!   progress-aligned token advantage pipeline (EP-GRPO).
//! - [`objective`]: clipped surrogate loss, the k3 KL estimator and the
//!   gradient-equivalence checker for the implicit regulariser.
//! - [`policy`]: a small linear-softmax sequence policy with exact gradients.
//! - [`tasks`]: synthetic tasks with exact binary verifiers.
//! - [`trainer`]: the desk-scale training loop and step metrics.
//! - [`analysis`]: post-hoc reports over metrics streams.

pub mod advantage;
pub mod analysis;
pub mod objective;
pub mod policy;
pub mod rollout;
pub mod stats;
pub mod tasks;
pub mod trainer;

pub use advantage::{compute_group_advantages, compute_group_advantages_with, ShapingFlags};
pub use rollout::{
    AdvantageConfig, GroupAdvantages, ResponseAdvantages, ResponseRecord, RolloutError,
    RolloutGroup, TokenAdvantage, TokenRecord,
};
