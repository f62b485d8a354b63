use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::state::PipelineState;
use super::{PipelineConfig, PipelineError};
use crate::merge::{MergeMethod, MergeRecipe, RecipeInput};
use crate::metrics::ScoreRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Planned,
    Merged,
    Scored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_id: String,
    /// Domains folded into this model, in merge order.
    pub domains: Vec<String>,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Model ids of the merged inputs (domain checkpoints at stage 1).
    pub inputs: Vec<String>,
    pub recipe: MergeRecipe,
    pub output: String,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreRow>,
}

impl ManifestEntry {
    fn same_plan(&self, other: &ManifestEntry) -> bool {
        self.model_id == other.model_id
            && self.domains == other.domains
            && self.gamma == other.gamma
            && self.seed == other.seed
            && self.inputs == other.inputs
            && self.recipe == other.recipe
            && self.output == other.output
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub stage: u8,
    pub method: MergeMethod,
    /// Model ids selected in earlier stages that this sweep builds on.
    pub parents: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl SweepManifest {
    pub fn file_name(stage: u8) -> String {
        format!("stage{stage}.manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let json = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&json).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_json_atomic(path, self)
    }

    /// Keeps the statuses and scores of an existing manifest at `path` when
    /// it describes the same plan.
    pub(crate) fn reconcile(self, path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Ok(self);
        }
        let existing = Self::load(path)?;
        let same = existing.stage == self.stage
            && existing.method == self.method
            && existing.parents == self.parents
            && existing.entries.len() == self.entries.len()
            && existing
                .entries
                .iter()
                .zip(&self.entries)
                .all(|(a, b)| a.same_plan(b));
        if same {
            Ok(existing)
        } else {
            Err(PipelineError::ManifestConflict {
                path: path.to_path_buf(),
            })
        }
    }
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut json = serde_json::to_string_pretty(value).expect("pipeline documents serialize");
    json.push('\n');
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, json).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn chain_suffix(seed: Option<u64>) -> String {
    seed.map(|s| format!("-s{s}")).unwrap_or_default()
}

pub(crate) fn model_id(
    stage: u8,
    method: MergeMethod,
    domains: &[String],
    gamma: f64,
    seed: Option<u64>,
) -> String {
    format!(
        "s{stage}-{method}-{}-g{gamma}{}",
        domains.join("+"),
        chain_suffix(seed)
    )
}

pub(crate) fn output_path(cfg: &PipelineConfig, stage: u8, model_id: &str) -> String {
    cfg.output_path()
        .join(format!("stage{stage}"))
        .join(format!("{model_id}.safetensors"))
        .to_string_lossy()
        .into_owned()
}

/// Stage 1 merges one model onto the base; later stages merge two models
/// whose task vectors are both taken against the original base.
fn recipe(cfg: &PipelineConfig, inputs: &[String], gamma: f64, seed: Option<u64>) -> MergeRecipe {
    let (weights, lambda, density) = match (cfg.method, inputs.len()) {
        (MergeMethod::Ta, 1) => (vec![1.0], gamma, None),
        (MergeMethod::Ta, _) => (vec![gamma, 1.0 - gamma], 1.0, None),
        (_, n) => (vec![1.0; n], 1.0, Some(gamma)),
    };
    MergeRecipe {
        method: cfg.method,
        base: cfg.base.clone(),
        inputs: inputs
            .iter()
            .zip(weights)
            .map(|(path, weight)| RecipeInput {
                path: path.clone(),
                weight,
            })
            .collect(),
        density,
        lambda,
        dare_seed: seed.unwrap_or(0),
        ties_inner_density: cfg.ties_inner_density,
        dtype: cfg.dtype,
    }
}

fn entry(
    cfg: &PipelineConfig,
    stage: u8,
    domains: Vec<String>,
    gamma: f64,
    seed: Option<u64>,
    inputs: Vec<(String, String)>,
) -> ManifestEntry {
    let id = model_id(stage, cfg.method, &domains, gamma, seed);
    let (ids, paths): (Vec<String>, Vec<String>) = inputs.into_iter().unzip();
    ManifestEntry {
        output: output_path(cfg, stage, &id),
        recipe: recipe(cfg, &paths, gamma, seed),
        model_id: id,
        domains,
        gamma,
        seed,
        inputs: ids,
        status: EntryStatus::Planned,
        scores: None,
    }
}

/// Every domain model merged onto the base at every grid value.
pub fn plan_stage1(cfg: &PipelineConfig) -> Result<SweepManifest, PipelineError> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for (domain, path) in &cfg.domains {
        for &gamma in &cfg.grid {
            for seed in cfg.chains() {
                entries.push(entry(
                    cfg,
                    1,
                    vec![domain.clone()],
                    gamma,
                    seed,
                    vec![(domain.clone(), path.clone())],
                ));
            }
        }
    }
    Ok(SweepManifest {
        stage: 1,
        method: cfg.method,
        parents: Vec::new(),
        entries,
    })
}

/// The two selected stage-1 winners merged over the grid.
pub fn plan_stage2(
    state: &PipelineState,
    cfg: &PipelineConfig,
) -> Result<SweepManifest, PipelineError> {
    let s1 = state.stage1.as_ref().ok_or(PipelineError::MissingDecision(2))?;
    let (c1, c2) = (&s1.pair.0, &s1.pair.1);
    let (b1, b2) = (s1.best(c1), s1.best(c2));
    let mut entries = Vec::new();
    for &gamma in &cfg.grid {
        for (k, seed) in cfg.chains().into_iter().enumerate() {
            let inputs = [&b1.model_ids[k], &b2.model_ids[k]]
                .map(|id| (id.clone(), output_path(cfg, 1, id)));
            entries.push(entry(cfg, 2, vec![c1.clone(), c2.clone()], gamma, seed, inputs.to_vec()));
        }
    }
    Ok(SweepManifest {
        stage: 2,
        method: cfg.method,
        parents: b1.model_ids.iter().chain(&b2.model_ids).cloned().collect(),
        entries,
    })
}

/// The stage-2 winner merged with the best remaining stage-1 winner. `None`
/// when no domain remains.
pub fn plan_stage3(
    state: &PipelineState,
    cfg: &PipelineConfig,
) -> Result<Option<SweepManifest>, PipelineError> {
    let s1 = state.stage1.as_ref().ok_or(PipelineError::MissingDecision(3))?;
    let s2 = state.stage2.as_ref().ok_or(PipelineError::MissingDecision(3))?;
    let Some(c3) = &s1.remaining else {
        return Ok(None);
    };
    let b3 = s1.best(c3);
    let domains = vec![s1.pair.0.clone(), s1.pair.1.clone(), c3.clone()];
    let mut entries = Vec::new();
    for &gamma in &cfg.grid {
        for (k, seed) in cfg.chains().into_iter().enumerate() {
            let inputs = vec![
                (s2.model_ids[k].clone(), output_path(cfg, 2, &s2.model_ids[k])),
                (b3.model_ids[k].clone(), output_path(cfg, 1, &b3.model_ids[k])),
            ];
            entries.push(entry(cfg, 3, domains.clone(), gamma, seed, inputs));
        }
    }
    Ok(Some(SweepManifest {
        stage: 3,
        method: cfg.method,
        parents: s2.model_ids.iter().chain(&b3.model_ids).cloned().collect(),
        entries,
    }))
}
