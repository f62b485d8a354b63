//! Shared generators and naive reference implementations for the
//! integration tests. Nothing here calls into the library's kernels.

#![allow(dead_code)]

use merge_forge::checkpoint::{Checkpoint, DType, Tensor};
use proptest::prelude::*;

pub type Layout = Vec<(String, DType, Vec<usize>)>;

pub fn arb_dtype() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::F32), Just(DType::F16), Just(DType::BF16)]
}

/// Up to three dims; trailing dims are dropped until the product fits.
pub fn arb_shape(max_numel: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..=12, 0..=3).prop_map(move |mut s| {
        while s.iter().product::<usize>() > max_numel {
            s.pop();
        }
        s
    })
}

pub fn arb_layout(max_tensors: usize, max_numel: usize) -> impl Strategy<Value = Layout> {
    prop::collection::btree_map(
        "[a-z]{1,4}(\\.[a-z0-9_]{1,4}){0,2}",
        (arb_dtype(), arb_shape(max_numel)),
        0..=max_tensors,
    )
    .prop_map(|m| m.into_iter().map(|(n, (d, s))| (n, d, s)).collect())
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn total_numel(layout: &Layout) -> usize {
    layout.iter().map(|(_, _, s)| numel(s)).sum()
}

/// Values on the grid k/16, |k| ≤ 64: exactly representable in every
/// supported dtype, and differences of two such values are exact in f32.
pub fn grid_value(k: i32) -> f32 {
    k as f32 / 16.0
}

pub fn build(layout: &Layout, values: &[f32]) -> Checkpoint {
    let mut offset = 0;
    layout
        .iter()
        .map(|(name, dtype, shape)| {
            let n = numel(shape);
            let t = Tensor::from_f32(*dtype, shape.clone(), &values[offset..offset + n]);
            offset += n;
            (name.clone(), t)
        })
        .collect()
}

/// A layout plus `count` value vectors on the exact grid.
pub fn arb_grid_family(
    max_tensors: usize,
    max_numel: usize,
    count: usize,
) -> impl Strategy<Value = (Layout, Vec<Vec<f32>>)> {
    arb_layout(max_tensors, max_numel).prop_flat_map(move |layout| {
        let n = total_numel(&layout);
        let one = prop::collection::vec((-64i32..=64).prop_map(grid_value), n);
        (Just(layout), prop::collection::vec(one, count))
    })
}

pub fn f32_checkpoint(id: &str, tensors: &[(&str, Vec<f32>)]) -> Checkpoint {
    let c: Checkpoint = tensors
        .iter()
        .map(|(n, v)| (n.to_string(), Tensor::from_f32(DType::F32, vec![v.len()], v)))
        .collect();
    c.with_id(id)
}

pub mod reference {
    //! Naive per-element references written directly from the method
    //! definitions.

    pub fn fnv1a64(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(1099511628211);
        }
        h
    }

    pub struct SplitMix(pub u64);

    impl SplitMix {
        pub fn next(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = self.0;
            z ^= z >> 30;
            z = z.wrapping_mul(0xBF58476D1CE4E5B9);
            z ^= z >> 27;
            z = z.wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        }
    }

    pub fn keep_mask(model_id: &str, tensor: &str, seed: u64, d: f64, n: usize) -> Vec<bool> {
        let mut key = model_id.as_bytes().to_vec();
        key.push(0);
        key.extend_from_slice(tensor.as_bytes());
        let mut g = SplitMix(fnv1a64(&key) ^ seed);
        (0..n)
            .map(|_| ((g.next() >> 11) as f64) * (1.0 / (1u64 << 53) as f64) < d)
            .collect()
    }

    pub fn dare(values: &[f32], model_id: &str, tensor: &str, seed: u64, d: f64) -> Vec<f32> {
        keep_mask(model_id, tensor, seed, d, values.len())
            .into_iter()
            .zip(values)
            .map(|(keep, &v)| if keep { (v as f64 / d) as f32 } else { 0.0 })
            .collect()
    }

    /// Sort by (|v| desc, index asc) and keep the first k.
    pub fn prune(values: &[f32], d: f64) -> Vec<f32> {
        let n = values.len();
        let k = ((d * n as f64 + 0.5).floor() as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            values[b]
                .abs()
                .partial_cmp(&values[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut out = vec![0.0; n];
        for &i in &idx[..k] {
            out[i] = values[i];
        }
        out
    }

    fn sgn(v: f32) -> i32 {
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    }

    /// Trim → elect → disjoint mean, one element at a time.
    pub fn ties(base: &[f32], deltas: &[Vec<f32>], d: f64, lambda: f32) -> Vec<f32> {
        let pruned: Vec<Vec<f32>> = deltas.iter().map(|t| prune(t, d)).collect();
        (0..base.len())
            .map(|p| {
                let mut sum = 0.0f32;
                for t in &pruned {
                    sum += t[p];
                }
                let elected = sgn(sum);
                let mut aligned_sum = 0.0f32;
                let mut count = 0;
                for t in &pruned {
                    if elected != 0 && sgn(t[p]) == elected {
                        aligned_sum += t[p];
                        count += 1;
                    }
                }
                let delta = if count == 0 {
                    0.0
                } else {
                    aligned_sum / count as f32
                };
                base[p] + lambda * delta
            })
            .collect()
    }

    pub fn task_arithmetic(base: &[f32], deltas: &[Vec<f32>], lambdas: &[f32]) -> Vec<f32> {
        (0..base.len())
            .map(|p| {
                let mut sum = 0.0f32;
                for (t, l) in deltas.iter().zip(lambdas) {
                    sum += l * t[p];
                }
                base[p] + sum
            })
            .collect()
    }
}
