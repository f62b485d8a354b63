use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Element types a checkpoint may carry. Anything else is rejected on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// The tag used in the file header.
    pub const fn tag(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }

    pub(crate) fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    /// Round-to-nearest-even for the 16-bit types.
    pub(crate) fn encode(self, values: &[f32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        match self {
            DType::F32 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
        }
        out
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "float32" => Ok(DType::F32),
            "f16" | "float16" => Ok(DType::F16),
            "bf16" | "bfloat16" => Ok(DType::BF16),
            _ => Err(format!("unsupported dtype `{s}` (expected f32, f16 or bf16)")),
        }
    }
}

/// Output dtype selection for written checkpoints.
///
/// `Preserve` keeps each tensor's dtype; for merges that means the base
/// checkpoint's per-tensor dtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DTypePolicy {
    #[default]
    Preserve,
    Cast(DType),
}

impl DTypePolicy {
    pub fn resolve(self, source: DType) -> DType {
        match self {
            DTypePolicy::Preserve => source,
            DTypePolicy::Cast(dtype) => dtype,
        }
    }
}

impl fmt::Display for DTypePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DTypePolicy::Preserve => f.write_str("preserve"),
            DTypePolicy::Cast(DType::F32) => f.write_str("f32"),
            DTypePolicy::Cast(DType::F16) => f.write_str("f16"),
            DTypePolicy::Cast(DType::BF16) => f.write_str("bf16"),
        }
    }
}

impl FromStr for DTypePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("preserve") {
            Ok(DTypePolicy::Preserve)
        } else {
            s.parse().map(DTypePolicy::Cast)
        }
    }
}

impl Serialize for DTypePolicy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DTypePolicy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_is_exact_in_f16() {
        let bytes = DType::F16.encode(&[1.0]);
        assert_eq!(DType::F16.decode(&bytes), vec![1.0]);
    }

    #[test]
    fn f16_rounds_to_nearest_even() {
        // f16 spacing in [2, 4) is 2^-9; 2.0000001 is far below half of it.
        let bytes = DType::F16.encode(&[2.000_000_1_f32]);
        assert_eq!(u16::from_le_bytes([bytes[0], bytes[1]]), 0x4000);
        // Exactly halfway between 2.0 and 2.0 + 2^-9 ties to the even mantissa (2.0).
        let halfway = 2.0 + 2f32.powi(-10);
        let bytes = DType::F16.encode(&[halfway]);
        assert_eq!(u16::from_le_bytes([bytes[0], bytes[1]]), 0x4000);
        // Halfway above an odd mantissa rounds up to the even one.
        let odd = 2.0 + 2f32.powi(-9);
        let bytes = DType::F16.encode(&[odd + 2f32.powi(-10)]);
        assert_eq!(u16::from_le_bytes([bytes[0], bytes[1]]), 0x4002);
    }

    #[test]
    fn bf16_rounds_to_nearest_even() {
        // bf16 keeps 8 significant bits; 1 + 2^-8 is halfway to 1 + 2^-7 and ties to 1.0.
        let bytes = DType::BF16.encode(&[1.0 + 2f32.powi(-8)]);
        assert_eq!(u16::from_le_bytes([bytes[0], bytes[1]]), 0x3F80);
        let bytes = DType::BF16.encode(&[1.0 + 3.0 * 2f32.powi(-8)]);
        assert_eq!(u16::from_le_bytes([bytes[0], bytes[1]]), 0x3F82);
    }

    #[test]
    fn policy_parses() {
        assert_eq!("preserve".parse::<DTypePolicy>(), Ok(DTypePolicy::Preserve));
        assert_eq!(
            "bf16".parse::<DTypePolicy>(),
            Ok(DTypePolicy::Cast(DType::BF16))
        );
        assert!("f64".parse::<DTypePolicy>().is_err());
        assert!(DType::from_tag("F64").is_none());
    }
}
