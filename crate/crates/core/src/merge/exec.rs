use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kernel, MergeError, MergeMethod, MergeRecipe};
use crate::checkpoint::{CheckpointReader, CheckpointWriter, CompatReport, Tensor, TensorSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub tensors: usize,
    pub param_count: usize,
}

/// Runs `recipe` against files, streaming one tensor at a time into `out`.
///
/// Peak memory is a small multiple of the largest tensor times the number of
/// inputs, independent of the checkpoint's tensor count. DARE streams are
/// keyed by each input's model id (header `model_id`, else file stem).
pub fn execute_recipe(
    recipe: &MergeRecipe,
    out: impl AsRef<Path>,
    metadata: &BTreeMap<String, String>,
) -> Result<MergeSummary, MergeError> {
    recipe.validate()?;
    let mut base = CheckpointReader::open(&recipe.base)?;
    let base_id = base.model_id();
    let base_layout = base.layout();

    let mut inputs = Vec::with_capacity(recipe.inputs.len());
    for input in &recipe.inputs {
        let reader = CheckpointReader::open(&input.path)?;
        let report = CompatReport::between(&base_layout, &reader.layout());
        if !report.is_compatible() {
            return Err(MergeError::Incompatible {
                base: recipe.base.clone(),
                model: input.path.clone(),
                report,
            });
        }
        inputs.push(reader);
    }
    let ids: Vec<String> = inputs.iter().map(CheckpointReader::model_id).collect();

    let entries = base_layout.iter().map(|(name, spec)| {
        (
            name.clone(),
            TensorSpec {
                dtype: recipe.dtype.resolve(spec.dtype),
                shape: spec.shape.clone(),
            },
        )
    });
    let mut writer = CheckpointWriter::create(out, entries, metadata)?;
    let lambdas: Vec<f32> = recipe.coefficients().iter().map(|&c| c as f32).collect();

    for (name, spec) in &base_layout {
        let base_values = base.read_tensor(name)?.to_f32();
        kernel::check_finite(&base_id, name, &base_values)?;

        let mut deltas = Vec::with_capacity(inputs.len());
        for (reader, id) in inputs.iter_mut().zip(&ids) {
            let values = reader.read_tensor(name)?.to_f32();
            kernel::check_finite(id, name, &values)?;
            let delta = kernel::delta(&base_values, &values);
            kernel::check_finite(id, name, &delta)?;
            deltas.push(delta);
        }

        let merged = match recipe.method {
            MergeMethod::Ta => {
                let refs: Vec<&[f32]> = deltas.iter().map(Vec::as_slice).collect();
                kernel::task_arithmetic_values(&base_values, &refs, &lambdas)
            }
            MergeMethod::Ties => {
                let d = recipe.density.expect("validated");
                ties(&base_values, deltas, d, recipe.lambda as f32)
            }
            MergeMethod::DareTies => {
                let d = recipe.density.expect("validated");
                let dropped: Vec<Vec<f32>> = deltas
                    .par_iter()
                    .zip(&ids)
                    .map(|(delta, id)| {
                        kernel::drop_and_rescale_values(delta, d, id, name, recipe.dare_seed)
                    })
                    .collect();
                ties(&base_values, dropped, recipe.ties_inner_density, recipe.lambda as f32)
            }
        };
        let dtype = recipe.dtype.resolve(spec.dtype);
        writer.write(name, &Tensor::from_f32(dtype, spec.shape.clone(), &merged))?;
    }
    writer.finish()?;

    Ok(MergeSummary {
        tensors: base_layout.len(),
        param_count: base.param_count(),
    })
}

fn ties(base: &[f32], deltas: Vec<Vec<f32>>, d: f64, lambda: f32) -> Vec<f32> {
    let pruned: Vec<Vec<f32>> = if d >= 1.0 {
        deltas
    } else {
        deltas
            .par_iter()
            .map(|v| kernel::prune_topd_values(v, d))
            .collect()
    };
    let refs: Vec<&[f32]> = pruned.iter().map(Vec::as_slice).collect();
    kernel::disjoint_merge(base, &refs, lambda)
}
