//! Core library for a seed-reproducible federated-learning simulator with
//! privacy-preserving misbehavior detection and contribution evaluation.
//!
//! The crate is organized bottom-up: models and data, the federation
//! orchestrator with its privacy boundary, group-testing detection, quality
//! inference scoring, non-private baselines, metric evaluation, and the
//! experiment harness tying them together.

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod fedgt;
pub mod harness;
pub mod model;
pub mod qi;
pub mod seeds;

pub use baselines::{BaselineMethod, BaselineScores};
pub use data::{AttackKind, AttackSpec, NoiseProfile, PartitionSpec};
pub use error::{Error, Result};
pub use evaluation::{CeResult, DetectionResult, Polarity, Spearman};
pub use federation::{PrivateRound, RoundRecord, SelectionMatrix, ServerView};
pub use fedgt::{AssignmentMatrix, ChannelModel, GroupOutcomes, LlrScores, MatrixStrategy};
pub use harness::{
    emit_outputs, replay, run_comprehensive, run_experiment, ExperimentConfig, Method,
    ResultsTable, RunManifest,
};
pub use model::{LabeledDataset, ModelKind, ParamVector, TrainConfig, Utility};
pub use qi::{ComparisonPlan, QiScores, RuleCounters, ScoreDelta};
