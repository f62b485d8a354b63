//! Per-tensor kernels shared by the in-memory API and the streaming executor.
//!
//! All arithmetic is `f32`; every kernel is a pure function of its inputs,
//! so element-level parallelism never changes results.

use rayon::prelude::*;

use super::MergeError;
use crate::rng::SplitMix64;

const PAR_MIN_LEN: usize = 1 << 14;

pub(crate) fn check_finite(model: &str, tensor: &str, values: &[f32]) -> Result<(), MergeError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(MergeError::NonFinite {
            model: model.to_string(),
            tensor: tensor.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// `model − base` elementwise. Both operands must already be finite.
pub(crate) fn delta(base: &[f32], model: &[f32]) -> Vec<f32> {
    base.iter().zip(model).map(|(b, m)| m - b).collect()
}

pub fn validate_density(d: f64) -> Result<(), MergeError> {
    if d > 0.0 && d <= 1.0 {
        Ok(())
    } else {
        Err(MergeError::InvalidDensity(d))
    }
}

/// Number of elements top-d pruning keeps: `round_half_up(d·n)` clamped to `[0, n]`.
pub fn retained_count(d: f64, n: usize) -> usize {
    let k = (d * n as f64 + 0.5).floor();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n)
    }
}

/// Keeps the `k` largest-magnitude entries, zeroing the rest. Magnitude ties
/// at the cut keep the smaller flat index.
pub fn prune_topd_values(values: &[f32], d: f64) -> Vec<f32> {
    let n = values.len();
    let k = retained_count(d, n);
    if k == n {
        return values.to_vec();
    }
    let mut out = vec![0.0f32; n];
    if k == 0 {
        return out;
    }

    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let (_, threshold, _) = mags.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let threshold = *threshold;
    drop(mags);

    let above = values.iter().filter(|v| v.abs() > threshold).count();
    let mut at_threshold = k - above;
    for (o, &v) in out.iter_mut().zip(values) {
        let m = v.abs();
        if m > threshold {
            *o = v;
        } else if m == threshold && at_threshold > 0 {
            *o = v;
            at_threshold -= 1;
        }
    }
    out
}

#[inline]
pub fn sign(v: f32) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

#[inline]
fn elected_sign(column: impl Iterator<Item = f32>) -> i8 {
    sign(column.fold(0.0f32, |acc, v| acc + v))
}

/// Per-element sign of the `f32` sum over inputs.
pub fn elect_sign_values(pruned: &[&[f32]]) -> Vec<i8> {
    let n = pruned.first().map_or(0, |p| p.len());
    (0..n)
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|i| elected_sign(pruned.iter().map(|p| p[i])))
        .collect()
}

/// `base + lambda · mean(aligned)` where aligned entries share the elected
/// (nonzero) sign; elements with no aligned entry keep the base value.
pub fn disjoint_merge(base: &[f32], pruned: &[&[f32]], lambda: f32) -> Vec<f32> {
    base.par_iter()
        .with_min_len(PAR_MIN_LEN)
        .enumerate()
        .map(|(i, &b)| {
            let elected = elected_sign(pruned.iter().map(|p| p[i]));
            if elected == 0 {
                return b;
            }
            let (sum, count) = pruned
                .iter()
                .map(|p| p[i])
                .filter(|&v| sign(v) == elected)
                .fold((0.0f32, 0u32), |(s, c), v| (s + v, c + 1));
            b + lambda * (sum / count as f32)
        })
        .collect()
}

/// `base + Σ λ_t τ_t`; the sum is accumulated left to right before adding to base.
pub fn task_arithmetic_values(base: &[f32], deltas: &[&[f32]], lambdas: &[f32]) -> Vec<f32> {
    base.par_iter()
        .with_min_len(PAR_MIN_LEN)
        .enumerate()
        .map(|(i, &b)| {
            let sum = deltas
                .iter()
                .zip(lambdas)
                .fold(0.0f32, |acc, (tau, &l)| acc + l * tau[i]);
            b + sum
        })
        .collect()
}

/// Bernoulli(d) keep mask applied in row-major order, survivors divided by `d`.
pub fn drop_and_rescale_values(
    values: &[f32],
    d: f64,
    model_id: &str,
    tensor: &str,
    global_seed: u64,
) -> Vec<f32> {
    let mut rng = SplitMix64::for_tensor(model_id, tensor, global_seed);
    values
        .iter()
        .map(|&v| {
            if rng.next_f64() < d {
                (f64::from(v) / d) as f32
            } else {
                0.0
            }
        })
        .collect()
}
