//! Header encoding for the safetensors layout:
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON][raw little-endian data]
//! ```
//!
//! The JSON maps tensor names to `{"dtype", "shape", "data_offsets"}` with an
//! optional `"__metadata__"` string map. Offsets are relative to the first
//! byte after the header.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use super::{CheckpointError, DType, TensorMeta};

pub(crate) const METADATA_KEY: &str = "__metadata__";
/// Upper bound on the header length we are willing to allocate for.
pub(crate) const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Header entries in file order, keeping duplicates so they can be rejected.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderValue<'a> {
    Metadata(&'a BTreeMap<String, String>),
    Tensor {
        dtype: &'static str,
        shape: &'a [usize],
        data_offsets: [u64; 2],
    },
}

pub(crate) struct Header {
    /// Sorted by name.
    pub metas: Vec<TensorMeta>,
    pub metadata: BTreeMap<String, String>,
}

/// Parses and validates a header. `available` is the size of the data region
/// actually present in the file.
pub(crate) fn parse_header(json: &[u8], available: u64) -> Result<Header, CheckpointError> {
    let text = std::str::from_utf8(json)
        .map_err(|e| CheckpointError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let raw: RawHeader = serde_json::from_str(text)
        .map_err(|e| CheckpointError::MalformedHeader(format!("invalid header JSON: {e}")))?;

    let mut seen = HashSet::new();
    let mut metadata = BTreeMap::new();
    let mut metas = Vec::with_capacity(raw.0.len());
    for (name, value) in raw.0 {
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value).map_err(|e| {
                CheckpointError::MalformedHeader(format!("`{METADATA_KEY}` must map strings to strings: {e}"))
            })?;
            continue;
        }
        if name.is_empty() {
            return Err(CheckpointError::EmptyName);
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| CheckpointError::MalformedHeader(format!("tensor `{name}`: {e}")))?;
        let dtype = DType::from_tag(&entry.dtype).ok_or_else(|| CheckpointError::UnsupportedDType {
            name: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(CheckpointError::MalformedHeader(format!(
                "tensor `{name}`: data_offsets [{begin}, {end}] are reversed"
            )));
        }
        let shape = entry
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|_| CheckpointError::MalformedHeader(format!("tensor `{name}`: dimension too large")))?;
        let expected = shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| {
                CheckpointError::MalformedHeader(format!("tensor `{name}`: byte size overflows"))
            })?;
        if expected != end - begin {
            return Err(CheckpointError::SizeMismatch {
                name,
                shape,
                expected,
                actual: end - begin,
            });
        }
        metas.push(TensorMeta {
            name,
            dtype,
            shape,
            data_offsets: (begin, end),
        });
    }

    check_placement(&metas, available)?;
    metas.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Header {
        metas,
        metadata,
    })
}

/// Offsets must tile `[0, total)` without overlap or gaps, in any header order.
fn check_placement(metas: &[TensorMeta], available: u64) -> Result<u64, CheckpointError> {
    let mut by_offset: Vec<&TensorMeta> = metas.iter().collect();
    by_offset.sort_by(|a, b| {
        a.data_offsets
            .cmp(&b.data_offsets)
            .then_with(|| a.name.cmp(&b.name))
    });

    let mut expected = 0u64;
    let mut previous: Option<&TensorMeta> = None;
    for meta in &by_offset {
        let (begin, end) = meta.data_offsets;
        if begin < expected {
            return Err(CheckpointError::OverlappingOffsets {
                name: meta.name.clone(),
                other: previous.map(|p| p.name.clone()).unwrap_or_default(),
            });
        }
        if begin > expected {
            return Err(CheckpointError::NonContiguous {
                name: meta.name.clone(),
                begin,
                expected,
            });
        }
        expected = end;
        if end > begin || previous.is_none() {
            previous = Some(meta);
        }
    }

    if available < expected {
        let culprit = by_offset
            .iter()
            .find(|m| m.data_offsets.1 > available)
            .expect("some tensor ends past the available bytes");
        return Err(CheckpointError::Truncated {
            name: culprit.name.clone(),
            end: culprit.data_offsets.1,
            available,
        });
    }
    if available > expected {
        return Err(CheckpointError::TrailingData(available - expected));
    }
    Ok(expected)
}

/// Assigns contiguous offsets in the given order.
pub(crate) fn place(entries: Vec<(String, DType, Vec<usize>)>) -> Vec<TensorMeta> {
    let mut offset = 0u64;
    entries
        .into_iter()
        .map(|(name, dtype, shape)| {
            let len = (shape.iter().product::<usize>() * dtype.size()) as u64;
            let meta = TensorMeta {
                name,
                dtype,
                shape,
                data_offsets: (offset, offset + len),
            };
            offset += len;
            meta
        })
        .collect()
}

/// Compact JSON header followed by space padding up to a multiple of 8 bytes,
/// prefixed with its length.
pub(crate) fn encode_header(metas: &[TensorMeta], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut doc: BTreeMap<&str, HeaderValue<'_>> = metas
        .iter()
        .map(|m| {
            (
                m.name.as_str(),
                HeaderValue::Tensor {
                    dtype: m.dtype.tag(),
                    shape: &m.shape,
                    data_offsets: [m.data_offsets.0, m.data_offsets.1],
                },
            )
        })
        .collect();
    if !metadata.is_empty() {
        doc.insert(METADATA_KEY, HeaderValue::Metadata(metadata));
    }
    let mut json = serde_json::to_vec(&doc).expect("header serialization cannot fail");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}
