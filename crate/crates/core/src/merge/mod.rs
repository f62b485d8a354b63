//! Task vectors and the three merge methods: Task Arithmetic, TIES and
//! DARE-TIES.
//!
//! The functions here operate on in-memory [`Checkpoint`]s and parallelise
//! over tensors. [`execute_recipe`] runs the same kernels tensor-by-tensor
//! against files, which is what the CLI and the pipeline use.

mod exec;
pub mod kernel;
mod recipe;

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{
    validate_compat, Checkpoint, CheckpointError, CompatReport, DTypePolicy, Tensor,
};

pub use exec::{execute_recipe, MergeSummary};
pub use recipe::{MergeMethod, MergeRecipe, RecipeInput};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("density {0} is outside (0, 1]")]
    InvalidDensity(f64),
    #[error("non-finite merge coefficient {0}")]
    InvalidCoefficient(f64),
    #[error("`{model}` is incompatible with base `{base}`: {report}")]
    Incompatible {
        base: String,
        model: String,
        report: CompatReport,
    },
    #[error("model `{model}`, tensor `{tensor}`: non-finite value at flat index {index}")]
    NonFinite {
        model: String,
        tensor: String,
        index: usize,
    },
    #[error("task vector `{model}` is relative to base `{found}`, expected `{expected}`")]
    BaseMismatch {
        model: String,
        expected: String,
        found: String,
    },
    #[error("{task_vectors} task vectors but {coefficients} coefficients")]
    LengthMismatch {
        task_vectors: usize,
        coefficients: usize,
    },
    #[error("at least one task vector is required")]
    NoInputs,
    #[error("tensor `{0}` is missing or differs in shape between inputs")]
    ShapeMismatch(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Per-tensor `model − base` in `f32`, plus the ids it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub base_id: String,
    pub model_id: String,
    deltas: BTreeMap<String, Delta>,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Option<&Delta> {
        self.deltas.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Delta)> {
        self.deltas.iter()
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    fn map_values(&self, f: impl Fn(&str, &[f32]) -> Vec<f32> + Sync) -> TaskVector {
        let deltas = self
            .deltas
            .par_iter()
            .map(|(name, d)| {
                (
                    name.clone(),
                    Delta {
                        shape: d.shape.clone(),
                        values: f(name, &d.values),
                    },
                )
            })
            .collect();
        TaskVector {
            base_id: self.base_id.clone(),
            model_id: self.model_id.clone(),
            deltas,
        }
    }
}

/// Per-tensor elected signs in `{-1, 0, +1}`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SignMap(BTreeMap<String, Vec<i8>>);

impl SignMap {
    pub fn get(&self, name: &str) -> Option<&[i8]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<i8>)> {
        self.0.iter()
    }
}

pub fn compute_task_vector(base: &Checkpoint, model: &Checkpoint) -> Result<TaskVector, MergeError> {
    let report = validate_compat(base, model);
    if !report.is_compatible() {
        return Err(MergeError::Incompatible {
            base: base.id().to_string(),
            model: model.id().to_string(),
            report,
        });
    }
    let deltas = base
        .tensors()
        .par_iter()
        .map(|(name, b)| {
            let bv = b.to_f32();
            kernel::check_finite(base.id(), name, &bv)?;
            let mv = model.get(name).expect("compatible checkpoints").to_f32();
            kernel::check_finite(model.id(), name, &mv)?;
            let values = kernel::delta(&bv, &mv);
            kernel::check_finite(model.id(), name, &values)?;
            Ok((
                name.clone(),
                Delta {
                    shape: b.shape().to_vec(),
                    values,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>, MergeError>>()?;
    Ok(TaskVector {
        base_id: base.id().to_string(),
        model_id: model.id().to_string(),
        deltas,
    })
}

fn check_task_vectors(base: &Checkpoint, tvs: &[TaskVector]) -> Result<(), MergeError> {
    if tvs.is_empty() {
        return Err(MergeError::NoInputs);
    }
    for tv in tvs {
        if tv.base_id != base.id() {
            return Err(MergeError::BaseMismatch {
                model: tv.model_id.clone(),
                expected: base.id().to_string(),
                found: tv.base_id.clone(),
            });
        }
        check_same_tensors(base, tv)?;
    }
    Ok(())
}

fn check_same_tensors(base: &Checkpoint, tv: &TaskVector) -> Result<(), MergeError> {
    if tv.len() != base.len() {
        let odd = base
            .names()
            .find(|n| tv.get(n).is_none())
            .or_else(|| tv.iter().map(|(n, _)| n).find(|n| base.get(n).is_none()))
            .cloned()
            .unwrap_or_default();
        return Err(MergeError::ShapeMismatch(odd));
    }
    for (name, t) in base.iter() {
        match tv.get(name) {
            Some(d) if d.shape == t.shape() => {}
            _ => return Err(MergeError::ShapeMismatch(name.clone())),
        }
    }
    Ok(())
}

/// Applies `combine` to every base tensor and the matching delta slices.
fn combine_per_tensor(
    base: &Checkpoint,
    tvs: &[TaskVector],
    policy: DTypePolicy,
    combine: impl Fn(&str, &[f32], &[&[f32]]) -> Vec<f32> + Sync,
) -> Result<Checkpoint, MergeError> {
    let tensors = base
        .tensors()
        .par_iter()
        .map(|(name, b)| {
            let bv = b.to_f32();
            kernel::check_finite(base.id(), name, &bv)?;
            let deltas: Vec<&[f32]> = tvs
                .iter()
                .map(|tv| tv.get(name).expect("checked").values.as_slice())
                .collect();
            let merged = combine(name, &bv, &deltas);
            let dtype = policy.resolve(b.dtype());
            Ok((name.clone(), Tensor::from_f32(dtype, b.shape().to_vec(), &merged)))
        })
        .collect::<Result<Vec<_>, MergeError>>()?;
    Ok(tensors.into_iter().collect())
}

/// `θ = θ₀ + Σ λ_t τ_t`.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    tvs: &[TaskVector],
    lambdas: &[f64],
    policy: DTypePolicy,
) -> Result<Checkpoint, MergeError> {
    check_task_vectors(base, tvs)?;
    if tvs.len() != lambdas.len() {
        return Err(MergeError::LengthMismatch {
            task_vectors: tvs.len(),
            coefficients: lambdas.len(),
        });
    }
    if let Some(&bad) = lambdas.iter().find(|l| !l.is_finite()) {
        return Err(MergeError::InvalidCoefficient(bad));
    }
    let lambdas: Vec<f32> = lambdas.iter().map(|&l| l as f32).collect();
    combine_per_tensor(base, tvs, policy, |_, b, deltas| {
        kernel::task_arithmetic_values(b, deltas, &lambdas)
    })
}

/// Keeps the top `d` fraction of each tensor by magnitude.
pub fn prune_topd(tv: &TaskVector, d: f64) -> Result<TaskVector, MergeError> {
    kernel::validate_density(d)?;
    Ok(tv.map_values(|_, v| kernel::prune_topd_values(v, d)))
}

pub fn elect_signs(pruned: &[TaskVector]) -> Result<SignMap, MergeError> {
    let first = pruned.first().ok_or(MergeError::NoInputs)?;
    for tv in &pruned[1..] {
        if tv.len() != first.len() {
            let odd = first
                .iter()
                .map(|(n, _)| n)
                .find(|n| tv.get(n).is_none())
                .cloned()
                .unwrap_or_default();
            return Err(MergeError::ShapeMismatch(odd));
        }
        for (name, d) in first.iter() {
            match tv.get(name) {
                Some(other) if other.shape == d.shape => {}
                _ => return Err(MergeError::ShapeMismatch(name.clone())),
            }
        }
    }
    let signs = first
        .deltas
        .par_iter()
        .map(|(name, _)| {
            let columns: Vec<&[f32]> = pruned
                .iter()
                .map(|tv| tv.get(name).expect("checked").values.as_slice())
                .collect();
            (name.clone(), kernel::elect_sign_values(&columns))
        })
        .collect();
    Ok(SignMap(signs))
}

/// Trim, elect sign, disjoint mean.
pub fn merge_ties(
    base: &Checkpoint,
    tvs: &[TaskVector],
    d: f64,
    lambda: f64,
    policy: DTypePolicy,
) -> Result<Checkpoint, MergeError> {
    kernel::validate_density(d)?;
    if !lambda.is_finite() {
        return Err(MergeError::InvalidCoefficient(lambda));
    }
    check_task_vectors(base, tvs)?;
    let lambda = lambda as f32;
    combine_per_tensor(base, tvs, policy, |_, b, deltas| {
        let pruned: Vec<Vec<f32>> = deltas
            .iter()
            .map(|v| kernel::prune_topd_values(v, d))
            .collect();
        let refs: Vec<&[f32]> = pruned.iter().map(Vec::as_slice).collect();
        kernel::disjoint_merge(b, &refs, lambda)
    })
}

/// Random drop with keep-probability `d`, survivors rescaled by `1/d`.
pub fn drop_and_rescale(tv: &TaskVector, d: f64, global_seed: u64) -> Result<TaskVector, MergeError> {
    kernel::validate_density(d)?;
    Ok(tv.map_values(|name, v| {
        kernel::drop_and_rescale_values(v, d, &tv.model_id, name, global_seed)
    }))
}

/// DARE on every task vector, then TIES with `ties_inner_density`.
pub fn merge_dare_ties(
    base: &Checkpoint,
    tvs: &[TaskVector],
    d: f64,
    lambda: f64,
    global_seed: u64,
    ties_inner_density: f64,
    policy: DTypePolicy,
) -> Result<Checkpoint, MergeError> {
    kernel::validate_density(d)?;
    kernel::validate_density(ties_inner_density)?;
    check_task_vectors(base, tvs)?;
    let dropped = tvs
        .iter()
        .map(|tv| drop_and_rescale(tv, d, global_seed))
        .collect::<Result<Vec<_>, _>>()?;
    merge_ties(base, &dropped, ties_inner_density, lambda, policy)
}
