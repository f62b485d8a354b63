//! Checkpoints: ordered collections of named tensors stored in the
//! safetensors layout.
//!
//! Tensors keep their raw little-endian bytes so that a load/save cycle is
//! bit-exact. Numeric work widens to `f32` through [`Tensor::to_f32`].

mod dtype;
mod format;
mod io;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dtype::{DType, DTypePolicy};
pub use io::{
    inspect, load_checkpoint, save_checkpoint, transcode, CheckpointReader, CheckpointWriter,
    InspectSummary, TensorSummary,
};

/// Provenance key holding a checkpoint's model id.
pub const MODEL_ID_KEY: &str = "model_id";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor `{name}`: unsupported dtype `{dtype}` (expected F32, F16 or BF16)")]
    UnsupportedDType { name: String, dtype: String },
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes but data_offsets span {actual}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        actual: u64,
    },
    #[error("tensor `{name}`: data_offsets overlap tensor `{other}`")]
    OverlappingOffsets { name: String, other: String },
    #[error("tensor `{name}`: data region is not contiguous (begins at {begin}, expected {expected})")]
    NonContiguous {
        name: String,
        begin: u64,
        expected: u64,
    },
    #[error("tensor `{name}`: truncated data region (ends at {end}, only {available} bytes present)")]
    Truncated {
        name: String,
        end: u64,
        available: u64,
    },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingData(u64),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("empty tensor name")]
    EmptyName,
    #[error("no tensor named `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}`: buffer holds {actual} bytes, shape {shape:?} as {dtype} needs {expected}")]
    BufferLength {
        name: String,
        dtype: DType,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("writer expected tensor `{expected}` next, got `{got}`")]
    WriteOrder { expected: String, got: String },
    #[error("writer finished with {0} tensors still unwritten")]
    Incomplete(usize),
}

/// Header entry of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// `[begin, end)` relative to the start of the data region.
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// Dtype and shape of a tensor, without data or placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// Name-ordered dtype/shape map; what compatibility checks compare.
pub type Layout = BTreeMap<String, TensorSpec>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    /// Wraps raw little-endian bytes. `name` is only used in the error.
    pub fn from_bytes(
        name: &str,
        dtype: DType,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self, CheckpointError> {
        let expected = shape.iter().product::<usize>() * dtype.size();
        if data.len() != expected {
            return Err(CheckpointError::BufferLength {
                name: name.to_string(),
                dtype,
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    /// Encodes `values` into `dtype`, rounding to nearest-even when narrowing.
    ///
    /// Panics if `values.len()` does not match the shape.
    pub fn from_f32(dtype: DType, shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "value count does not match shape {shape:?}"
        );
        Self {
            dtype,
            shape,
            data: dtype.encode(values),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.dtype.decode(&self.data)
    }

    pub fn spec(&self) -> TensorSpec {
        TensorSpec {
            dtype: self.dtype,
            shape: self.shape.clone(),
        }
    }

    /// Converts to `dtype` through `f32`. Same-dtype casts return an identical copy.
    pub fn cast(&self, dtype: DType) -> Self {
        if dtype == self.dtype {
            return self.clone();
        }
        Self::from_f32(dtype, self.shape.clone(), &self.to_f32())
    }
}

/// An in-memory checkpoint. Iteration is always in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    /// Free-form string map; round-trips through the `__metadata__` header entry.
    pub provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the `model_id` provenance entry.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.provenance.insert(MODEL_ID_KEY.to_string(), id.into());
        self
    }

    /// The `model_id` provenance entry, or `""` when absent.
    pub fn id(&self) -> &str {
        self.provenance
            .get(MODEL_ID_KEY)
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn layout(&self) -> Layout {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), t.spec()))
            .collect()
    }

    pub(crate) fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }
}

impl FromIterator<(String, Tensor)> for Checkpoint {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
            provenance: BTreeMap::new(),
        }
    }
}

/// Differences between two checkpoint layouts. Empty means merge-compatible.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatReport {
    pub missing_in_a: Vec<String>,
    pub missing_in_b: Vec<String>,
    pub shape_mismatches: Vec<(String, Vec<usize>, Vec<usize>)>,
    pub dtype_mismatches: Vec<(String, DType, DType)>,
}

impl CompatReport {
    pub fn between(a: &Layout, b: &Layout) -> Self {
        let mut report = Self::default();
        for (name, spec_a) in a {
            match b.get(name) {
                None => report.missing_in_b.push(name.clone()),
                Some(spec_b) => {
                    if spec_a.shape != spec_b.shape {
                        report.shape_mismatches.push((
                            name.clone(),
                            spec_a.shape.clone(),
                            spec_b.shape.clone(),
                        ));
                    }
                    if spec_a.dtype != spec_b.dtype {
                        report
                            .dtype_mismatches
                            .push((name.clone(), spec_a.dtype, spec_b.dtype));
                    }
                }
            }
        }
        report.missing_in_a = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
        report
    }

    pub fn is_compatible(&self) -> bool {
        self.missing_in_a.is_empty()
            && self.missing_in_b.is_empty()
            && self.shape_mismatches.is_empty()
            && self.dtype_mismatches.is_empty()
    }

    /// First offending tensor, for error messages.
    pub fn first_offender(&self) -> Option<&str> {
        self.missing_in_a
            .first()
            .or(self.missing_in_b.first())
            .or(self.shape_mismatches.first().map(|m| &m.0))
            .or(self.dtype_mismatches.first().map(|m| &m.0))
            .map(String::as_str)
    }
}

impl std::fmt::Display for CompatReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_compatible() {
            return write!(f, "compatible");
        }
        let mut parts = Vec::new();
        if !self.missing_in_a.is_empty() {
            parts.push(format!("missing in a: {}", self.missing_in_a.join(", ")));
        }
        if !self.missing_in_b.is_empty() {
            parts.push(format!("missing in b: {}", self.missing_in_b.join(", ")));
        }
        for (name, sa, sb) in &self.shape_mismatches {
            parts.push(format!("`{name}` shape {sa:?} vs {sb:?}"));
        }
        for (name, da, db) in &self.dtype_mismatches {
            parts.push(format!("`{name}` dtype {da} vs {db}"));
        }
        write!(f, "{}", parts.join("; "))
    }
}

pub fn validate_compat(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    CompatReport::between(&a.layout(), &b.layout())
}
