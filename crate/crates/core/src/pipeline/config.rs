use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::PipelineError;
use crate::checkpoint::DTypePolicy;
use crate::merge::{kernel, MergeMethod};

/// Pipeline configuration file.
///
/// Relative paths are resolved against the directory holding the config
/// file when loaded with [`PipelineConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: MergeMethod,
    pub base: String,
    /// Domain id → checkpoint path, in declaration order.
    #[serde(deserialize_with = "unique_domains")]
    pub domains: IndexMap<String, String>,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    /// Tasks averaged into the selection score. Defaults to every task the
    /// first scored stage-1 model reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_tasks: Option<Vec<String>>,
    /// DARE seeds; each seed runs its own chain through all stages and
    /// decisions use the mean score across chains. Ignored by `ta`/`ties`.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<EvaluatorConfig>,
    pub output_dir: String,
    /// Tie-break order for domain selection. Defaults to declaration order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_break_order: Option<Vec<String>>,
    #[serde(default)]
    pub dtype: DTypePolicy,
    #[serde(default = "one")]
    pub ties_inner_density: f64,
}

/// External scoring command. Each argument may contain the placeholders
/// `{checkpoint}`, `{out}`, `{model_id}` and `{tasks}` (comma-separated
/// selection tasks, empty when unset). The command must exit 0 and write a
/// score table containing `model_id` to `{out}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub command: Vec<String>,
}

fn default_grid() -> Vec<f64> {
    (1..=9).map(|k| f64::from(k) / 10.0).collect()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn one() -> f64 {
    1.0
}

fn unique_domains<'de, D: Deserializer<'de>>(d: D) -> Result<IndexMap<String, String>, D::Error> {
    struct DomainsVisitor;

    impl<'de> Visitor<'de> for DomainsVisitor {
        type Value = IndexMap<String, String>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("an object mapping domain ids to checkpoint paths")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = IndexMap::new();
            while let Some((id, path)) = map.next_entry::<String, String>()? {
                if out.contains_key(&id) {
                    return Err(de::Error::custom(format!("duplicate domain id `{id}`")));
                }
                out.insert(id, path);
            }
            Ok(out)
        }
    }

    d.deserialize_map(DomainsVisitor)
}

fn resolve(dir: &Path, p: &str) -> String {
    if Path::new(p).is_absolute() {
        p.to_string()
    } else {
        dir.join(p).to_string_lossy().into_owned()
    }
}

impl PipelineConfig {
    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            serde_json::from_str(json).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&json)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        cfg.base = resolve(dir, &cfg.base);
        cfg.output_dir = resolve(dir, &cfg.output_dir);
        for p in cfg.domains.values_mut() {
            *p = resolve(dir, p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.domains.is_empty() {
            return err("at least one domain is required".into());
        }
        if let Some(id) = self.domains.keys().find(|id| {
            id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        }) {
            return err(format!(
                "domain id `{id}` must be non-empty and use only letters, digits and `_`"
            ));
        }
        if self.grid.is_empty() {
            return err("grid is empty".into());
        }
        if let Some(g) = self.grid.iter().find(|&&g| !(g > 0.0 && g <= 1.0)) {
            return err(format!("grid value {g} is outside (0, 1]"));
        }
        for (i, g) in self.grid.iter().enumerate() {
            if self.grid[..i].contains(g) {
                return err(format!("grid value {g} appears more than once"));
            }
        }
        if self.method.is_stochastic() {
            if self.seeds.is_empty() {
                return err("dare-ties needs at least one seed".into());
            }
            for (i, s) in self.seeds.iter().enumerate() {
                if self.seeds[..i].contains(s) {
                    return err(format!("seed {s} appears more than once"));
                }
            }
        }
        if let Some(order) = &self.tie_break_order {
            let mut sorted: Vec<&String> = order.iter().collect();
            sorted.sort();
            let mut ids: Vec<&String> = self.domains.keys().collect();
            ids.sort();
            if sorted != ids {
                return err("tie_break_order must list every domain id exactly once".into());
            }
        }
        if let Some(tasks) = &self.selection_tasks {
            if tasks.is_empty() {
                return err("selection_tasks is empty".into());
            }
        }
        if let Some(ev) = &self.evaluator {
            if ev.command.is_empty() {
                return err("evaluator command is empty".into());
            }
        }
        kernel::validate_density(self.ties_inner_density)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.domains.keys().cloned().collect()
    }

    pub fn tie_order(&self) -> Vec<String> {
        self.tie_break_order
            .clone()
            .unwrap_or_else(|| self.domain_ids())
    }

    /// One chain per DARE seed; a single unseeded chain otherwise.
    pub fn chains(&self) -> Vec<Option<u64>> {
        if self.method.is_stochastic() {
            self.seeds.iter().copied().map(Some).collect()
        } else {
            vec![None]
        }
    }

    pub fn output_path(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }
}
