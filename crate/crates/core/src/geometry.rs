//! Parameter-space similarity between checkpoints and rank correlation
//! between similarity and merge outcomes.

use std::ops::Add;
use std::path::Path;

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointReader, Layout};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("the parameter filter selects no parameters")]
    EmptySelection,
    #[error("tensor `{name}` is selected but missing from `{model}`")]
    Missing { name: String, model: String },
    #[error("tensor `{name}` has shape {a:?} vs {b:?}")]
    ShapeMismatch {
        name: String,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("`{0}` has zero norm over the selected parameters; cosine is undefined")]
    ZeroNorm(String),
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("rank correlation needs at least 3 observations, got {0}")]
    TooFew(usize),
    #[error("input is constant; rank correlation is undefined")]
    ConstantInput,
    #[error("non-finite observation at index {0}")]
    NonFinite(usize),
    #[error("invalid pattern `{pattern}`: {message}")]
    Pattern { pattern: String, message: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Glob-style tensor-name selection. A tensor is selected iff it matches some
/// include pattern (an empty include list matches everything) and no exclude
/// pattern.
#[derive(Debug, Clone, Default)]
pub struct ParamFilter {
    include: Vec<glob::Pattern>,
    exclude: Vec<glob::Pattern>,
}

/// Name fragments of embedding and output-head tensors across common
/// architectures.
pub const NON_LAYER_PATTERNS: &[&str] = &["*embed*", "*lm_head*", "*wte.*", "*wpe.*", "*output.weight"];

impl ParamFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn new<S: AsRef<str>>(include: &[S], exclude: &[S]) -> Result<Self, GeometryError> {
        let compile = |patterns: &[S]| {
            patterns
                .iter()
                .map(|p| {
                    glob::Pattern::new(p.as_ref()).map_err(|e| GeometryError::Pattern {
                        pattern: p.as_ref().to_string(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            include: compile(include)?,
            exclude: compile(exclude)?,
        })
    }

    /// Drops embedding and output-head tensors, keeping the transformer blocks
    /// (and norms).
    pub fn transformer_layers() -> Self {
        Self::new::<&str>(&[], NON_LAYER_PATTERNS).expect("static patterns are valid")
    }

    pub fn selects(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.iter().any(|p| p.matches(name)))
            && !self.exclude.iter().any(|p| p.matches(name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub model_a: String,
    pub model_b: String,
    pub param_count: usize,
    /// `‖a − b‖₂ / n`.
    pub l2_normalized: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    diff_sq: f64,
    dot: f64,
    norm_a: f64,
    norm_b: f64,
}

impl Add for Moments {
    type Output = Moments;

    fn add(self, o: Moments) -> Moments {
        Moments {
            diff_sq: self.diff_sq + o.diff_sq,
            dot: self.dot + o.dot,
            norm_a: self.norm_a + o.norm_a,
            norm_b: self.norm_b + o.norm_b,
        }
    }
}

const PAIRWISE_BLOCK: usize = 128;
const PARALLEL_SPLIT: usize = 1 << 16;

/// Pairwise (tree) summation over a fixed split, so the result does not
/// depend on how many threads run the halves.
fn moments(a: &[f32], b: &[f32]) -> Moments {
    let n = a.len();
    if n <= PAIRWISE_BLOCK {
        return a.iter().zip(b).fold(Moments::default(), |m, (&x, &y)| {
            let (x, y) = (f64::from(x), f64::from(y));
            let d = x - y;
            Moments {
                diff_sq: m.diff_sq + d * d,
                dot: m.dot + x * y,
                norm_a: m.norm_a + x * x,
                norm_b: m.norm_b + y * y,
            }
        });
    }
    let mid = n / 2;
    let (left, right) = if n >= PARALLEL_SPLIT {
        rayon::join(
            || moments(&a[..mid], &b[..mid]),
            || moments(&a[mid..], &b[mid..]),
        )
    } else {
        (moments(&a[..mid], &b[..mid]), moments(&a[mid..], &b[mid..]))
    };
    left + right
}

fn pairwise_total(parts: &[Moments]) -> Moments {
    match parts.len() {
        0 => Moments::default(),
        1 => parts[0],
        n => pairwise_total(&parts[..n / 2]) + pairwise_total(&parts[n / 2..]),
    }
}

fn selected_names(
    filter: &ParamFilter,
    (id_a, layout_a): (&str, &Layout),
    (id_b, layout_b): (&str, &Layout),
) -> Result<Vec<(String, usize)>, GeometryError> {
    let mut selected = Vec::new();
    for (name, spec_a) in layout_a.iter().filter(|(n, _)| filter.selects(n)) {
        let spec_b = layout_b.get(name).ok_or_else(|| GeometryError::Missing {
            name: name.clone(),
            model: id_b.to_string(),
        })?;
        if spec_a.shape != spec_b.shape {
            return Err(GeometryError::ShapeMismatch {
                name: name.clone(),
                a: spec_a.shape.clone(),
                b: spec_b.shape.clone(),
            });
        }
        selected.push((name.clone(), spec_a.shape.iter().product()));
    }
    if let Some(name) = layout_b
        .keys()
        .find(|n| filter.selects(n) && !layout_a.contains_key(*n))
    {
        return Err(GeometryError::Missing {
            name: name.clone(),
            model: id_a.to_string(),
        });
    }
    Ok(selected)
}

fn finish(
    model_a: &str,
    model_b: &str,
    n: usize,
    parts: &[Moments],
) -> Result<DistanceReport, GeometryError> {
    if n == 0 {
        return Err(GeometryError::EmptySelection);
    }
    let total = pairwise_total(parts);
    if total.norm_a == 0.0 {
        return Err(GeometryError::ZeroNorm(model_a.to_string()));
    }
    if total.norm_b == 0.0 {
        return Err(GeometryError::ZeroNorm(model_b.to_string()));
    }
    let cosine = (total.dot / (total.norm_a.sqrt() * total.norm_b.sqrt())).clamp(-1.0, 1.0);
    Ok(DistanceReport {
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        param_count: n,
        l2_normalized: total.diff_sq.sqrt() / n as f64,
        cosine,
    })
}

/// Normalized L2 distance and cosine similarity over the selected tensors,
/// treated as one flat vector in canonical name order.
pub fn distance(
    a: &Checkpoint,
    b: &Checkpoint,
    filter: &ParamFilter,
) -> Result<DistanceReport, GeometryError> {
    let (layout_a, layout_b) = (a.layout(), b.layout());
    let selected = selected_names(filter, (a.id(), &layout_a), (b.id(), &layout_b))?;
    let n = selected.iter().map(|(_, len)| len).sum();
    let parts: Vec<Moments> = selected
        .iter()
        .map(|(name, _)| {
            let va = a.get(name).expect("selected").to_f32();
            let vb = b.get(name).expect("selected").to_f32();
            moments(&va, &vb)
        })
        .collect();
    finish(a.id(), b.id(), n, &parts)
}

/// [`distance`] over files, reading one tensor pair at a time.
pub fn distance_files(
    path_a: impl AsRef<Path>,
    path_b: impl AsRef<Path>,
    filter: &ParamFilter,
) -> Result<DistanceReport, GeometryError> {
    let mut a = CheckpointReader::open(path_a)?;
    let mut b = CheckpointReader::open(path_b)?;
    let (id_a, id_b) = (a.model_id(), b.model_id());
    let selected = selected_names(filter, (&id_a, &a.layout()), (&id_b, &b.layout()))?;
    let n = selected.iter().map(|(_, len)| len).sum();
    let mut parts = Vec::with_capacity(selected.len());
    for (name, _) in &selected {
        let va = a.read_tensor(name)?.to_f32();
        let vb = b.read_tensor(name)?.to_f32();
        parts.push(moments(&va, &vb));
    }
    finish(&id_a, &id_b, n, &parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMethod {
    ExactPermutation,
    TApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
    pub method: PValueMethod,
}

/// Largest sample size whose p-value is computed by full enumeration.
pub const EXACT_PERMUTATION_MAX_N: usize = 8;
/// Tolerance for treating a permuted statistic as equal to the observed one.
const TIE_EPS: f64 = 1e-12;

/// 1-based ranks; tied values receive the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Spearman's ρ with a two-sided p-value: exact permutation for
/// `n ≤ 8`, Student-t approximation with `n − 2` degrees of freedom above.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<SpearmanResult, GeometryError> {
    if xs.len() != ys.len() {
        return Err(GeometryError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(GeometryError::TooFew(n));
    }
    if let Some(i) = xs.iter().chain(ys).position(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite(i % n));
    }
    let cx = centered(&average_ranks(xs));
    let cy = centered(&average_ranks(ys));
    let sxx: f64 = cx.iter().map(|v| v * v).sum();
    let syy: f64 = cy.iter().map(|v| v * v).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(GeometryError::ConstantInput);
    }
    let denom = (sxx * syy).sqrt();
    let statistic =
        |perm: &mut dyn Iterator<Item = f64>| cx.iter().zip(perm).map(|(a, b)| a * b).sum::<f64>() / denom;
    let rho = statistic(&mut cy.iter().copied()).clamp(-1.0, 1.0);

    if n <= EXACT_PERMUTATION_MAX_N {
        let (mut upper, mut lower, mut total) = (0u64, 0u64, 0u64);
        for perm in (0..n).permutations(n) {
            let r = statistic(&mut perm.iter().map(|&i| cy[i]));
            if r >= rho - TIE_EPS {
                upper += 1;
            }
            if r <= rho + TIE_EPS {
                lower += 1;
            }
            total += 1;
        }
        let p_value = (2.0 * upper.min(lower) as f64 / total as f64).min(1.0);
        return Ok(SpearmanResult {
            rho,
            p_value,
            n,
            method: PValueMethod::ExactPermutation,
        });
    }

    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(SpearmanResult {
        rho,
        p_value,
        n,
        method: PValueMethod::TApproximation,
    })
}
