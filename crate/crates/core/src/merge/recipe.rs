use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{kernel, MergeError};
use crate::checkpoint::DTypePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    Ta,
    Ties,
    DareTies,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Ta => "ta",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTies => "dare-ties",
        }
    }

    /// Whether outputs depend on the DARE seed.
    pub fn is_stochastic(self) -> bool {
        self == MergeMethod::DareTies
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ta" => Ok(MergeMethod::Ta),
            "ties" => Ok(MergeMethod::Ties),
            "dare-ties" => Ok(MergeMethod::DareTies),
            _ => Err(format!("unknown merge method `{s}` (expected ta, ties or dare-ties)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeInput {
    /// Checkpoint path.
    pub path: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Everything needed to reproduce one merge.
///
/// For `ta` the coefficient of input `t` is `weight_t · lambda`. For `ties`
/// and `dare-ties` every weight must be 1 and `lambda` scales the merged
/// delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub base: String,
    pub inputs: Vec<RecipeInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub dare_seed: u64,
    #[serde(default = "one")]
    pub ties_inner_density: f64,
    #[serde(default)]
    pub dtype: DTypePolicy,
}

impl MergeRecipe {
    pub fn validate(&self) -> Result<(), MergeError> {
        if self.inputs.is_empty() {
            return Err(MergeError::NoInputs);
        }
        if !self.lambda.is_finite() {
            return Err(MergeError::InvalidCoefficient(self.lambda));
        }
        if let Some(input) = self.inputs.iter().find(|i| !i.weight.is_finite()) {
            return Err(MergeError::InvalidCoefficient(input.weight));
        }
        match self.method {
            MergeMethod::Ta => Ok(()),
            MergeMethod::Ties | MergeMethod::DareTies => {
                let d = self.density.ok_or_else(|| {
                    MergeError::InvalidRecipe(format!("{} requires a density", self.method))
                })?;
                kernel::validate_density(d)?;
                kernel::validate_density(self.ties_inner_density)?;
                if let Some(input) = self.inputs.iter().find(|i| i.weight != 1.0) {
                    return Err(MergeError::InvalidRecipe(format!(
                        "input `{}` has weight {}; per-input weights apply only to ta",
                        input.path, input.weight
                    )));
                }
                Ok(())
            }
        }
    }

    /// Per-input task-arithmetic coefficients.
    pub fn coefficients(&self) -> Vec<f64> {
        self.inputs.iter().map(|i| i.weight * self.lambda).collect()
    }
}
