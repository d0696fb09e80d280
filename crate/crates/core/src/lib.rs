//! Reward stack, GRPO optimization and desk-scale training harness for
//! two-pass self-rewarding reasoning segmentation.

pub mod exec;
pub mod geometry;
pub mod grpo;
pub mod harness;
pub mod matching;
pub mod oracles;
pub mod rewards;
pub mod rollout;
pub mod structured_output;

/// Engine version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
