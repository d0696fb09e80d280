//! Desk-scale stand-in for the full training setup: synthetic scenes and
//! queries, a factored template policy with closed-form log-probs, a local
//! mask oracle, and the GRPO training loop.

use thiserror::Error;

mod config;
mod oracle;
mod policy;
mod query;
mod scene;
mod sweep;
mod train;

pub use config::{ConfigError, PolicyPreset, TrainConfig};
pub use oracle::MaskOracle;
pub use policy::{
    AnswerKind, Context, Decision, DescKind, TemplateChoice, TemplatePolicy, FIRST_PASS_LENGTHS, GROUNDED_LENGTH_BIAS,
    NUM_PARAMS, SECOND_PASS_LENGTHS,
};
pub use query::{class_clue, describe_unique, generate_query, resolve, Difficulty, QueryCase};
pub use scene::{generate_scene, Scene, SceneConfig, SceneObject, Side, CLASSES, COLORS, POSES};
pub use sweep::{ablation, ablation_row, render_ablation, ABLATION_ROWS, render_sweep, sweep, AblationRow, SweepReport, SweepRow};
pub use train::{
    evaluate, policy_gradient, policy_update, surrogate_objective, train, train_with, EvalCase, EvalReport,
    GradientSample, StepMetrics, TrainReport, TrainState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no valid target for a {0} query in this scene")]
    Unresolvable(&'static str),
    #[error("gradient has a non-finite entry at parameter {0}")]
    NonFiniteGradient(usize),
    #[error(transparent)]
    Rollout(#[from] crate::rollout::RolloutError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
