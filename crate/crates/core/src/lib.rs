//! Weight-space merging of neural-network checkpoints.
//!
//! The crate is organised around a handful of independent layers:
//!
//! - [`checkpoint`]: streaming reader/writer for safetensors-layout files.
//! - [`merge`]: task vectors and the Task Arithmetic, TIES and DARE-TIES
//!   merge methods, plus a streaming executor that runs a [`merge::MergeRecipe`]
//!   against files on disk.
//! - [`geometry`]: normalized L2 / cosine similarity between checkpoints and
//!   Spearman rank correlation.
//! - [`metrics`]: Gain, Outperform Gap, Oracle Retention and friends computed
//!   from ingested score tables.
//! - [`pipeline`]: the staged single / dual / full merge-and-select pipeline
//!   with plan, execute and resume modes.

pub mod checkpoint;
pub mod geometry;
pub mod merge;
pub mod metrics;
pub mod pipeline;
pub mod rng;

pub use checkpoint::{
    inspect, load_checkpoint, save_checkpoint, validate_compat, Checkpoint, CheckpointError,
    CompatReport, DType, DTypePolicy, Tensor, TensorMeta,
};
pub use merge::{MergeError, MergeMethod, MergeRecipe, TaskVector};
