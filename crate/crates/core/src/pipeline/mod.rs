//! Three-stage merge-and-select pipeline.
//!
//! Stage 1 sweeps each domain model merged onto the base over the grid and
//! keeps the best setting per domain. Stage 2 merges the two best domains'
//! winners over the same grid. Stage 3 merges the stage-2 winner with the
//! winner of the best remaining domain. Scores come from an external
//! evaluator (execute mode) or from a score-table file (resume mode).

mod config;
mod manifest;
mod run;
mod select;
mod state;

use std::path::PathBuf;

use thiserror::Error;

use crate::merge::MergeError;
use crate::metrics::MetricsError;

pub use config::{EvaluatorConfig, PipelineConfig};
pub use manifest::{
    plan_stage1, plan_stage2, plan_stage3, EntryStatus, ManifestEntry, SweepManifest,
};
pub use run::{run, Outcome, RunMode, RunReport};
pub use select::{rank_domains, select_best, select_top2};
pub use state::{
    decide_stage1, decide_sweep, DomainBest, Failure, FinalModel, GammaScore, PipelineState,
    Stage1Decision, Stage3Outcome, SweepDecision, STATE_SCHEMA,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("selection failed: {0}")]
    Selection(String),
    #[error("stage {0} cannot be planned before the previous stage is decided")]
    MissingDecision(u8),
    #[error("no scores for `{model_id}` (stage {stage}); every planned model of a stage must be scored")]
    MissingScores { stage: u8, model_id: String },
    #[error("{path}: existing manifest does not match the current plan")]
    ManifestConflict { path: PathBuf },
    #[error("state file {path} was written for a different config ({field} differs)")]
    StateConflict { path: PathBuf, field: &'static str },
    #[error("{path}: unsupported state file ({message})")]
    StateFormat { path: PathBuf, message: String },
    #[error("evaluator failed on `{model_id}`: {message}")]
    Evaluator { model_id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
