use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{write_json_atomic, ManifestEntry, SweepManifest};
use super::select::{rank_domains, select_best};
use super::{PipelineConfig, PipelineError};
use crate::merge::MergeMethod;
use crate::metrics::MetricsError;

pub const STATE_SCHEMA: &str = "merge-forge/pipeline-state/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaScore {
    pub gamma: f64,
    /// Selection score, averaged over seed chains.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBest {
    pub domain: String,
    pub gamma: f64,
    pub score: f64,
    /// The winning model of each seed chain.
    pub model_ids: Vec<String>,
    pub sweep: Vec<GammaScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Decision {
    /// In domain declaration order.
    pub per_domain: Vec<DomainBest>,
    /// All domains, best first.
    pub ranking: Vec<String>,
    pub pair: (String, String),
    /// Best domain outside the pair, if any.
    pub remaining: Option<String>,
    /// Selection score of every model the decision looked at.
    pub model_scores: BTreeMap<String, f64>,
}

impl Stage1Decision {
    pub fn best(&self, domain: &str) -> &DomainBest {
        self.per_domain
            .iter()
            .find(|b| b.domain == domain)
            .expect("decided domains come from the config")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDecision {
    pub gamma: f64,
    pub score: f64,
    pub model_ids: Vec<String>,
    pub sweep: Vec<GammaScore>,
    pub model_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage3Outcome {
    /// Only two domains: nothing remains to merge.
    Skipped,
    Decided(SweepDecision),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalModel {
    pub stage: u8,
    pub gamma: f64,
    pub score: f64,
    pub model_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub model_id: String,
    pub message: String,
}

/// Decisions recorded so far. Once a stage's decision is set it is never
/// rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub schema: String,
    pub method: MergeMethod,
    pub domains: Vec<String>,
    pub grid: Vec<f64>,
    /// DARE seed chains; empty for deterministic methods.
    pub seeds: Vec<u64>,
    pub selection_tasks: Option<Vec<String>>,
    pub stage1: Option<Stage1Decision>,
    pub stage2: Option<SweepDecision>,
    pub stage3: Option<Stage3Outcome>,
    pub final_model: Option<FinalModel>,
    pub last_error: Option<Failure>,
}

impl PipelineState {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            schema: STATE_SCHEMA.to_string(),
            method: cfg.method,
            domains: cfg.domain_ids(),
            grid: cfg.grid.clone(),
            seeds: cfg.chains().into_iter().flatten().collect(),
            selection_tasks: None,
            stage1: None,
            stage2: None,
            stage3: None,
            final_model: None,
            last_error: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let json = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value =
            serde_json::from_str(&json).map_err(|source| PipelineError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(STATE_SCHEMA) => {}
            other => {
                return Err(PipelineError::StateFormat {
                    path: path.to_path_buf(),
                    message: format!("schema tag {other:?}, expected {STATE_SCHEMA:?}"),
                })
            }
        }
        serde_json::from_value(value).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_json_atomic(path, self)
    }

    /// Loads `path` if it exists, else starts fresh.
    pub fn open(path: &Path, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Ok(Self::new(cfg));
        }
        let state = Self::load(path)?;
        let fresh = Self::new(cfg);
        let conflict = |field| {
            Err(PipelineError::StateConflict {
                path: path.to_path_buf(),
                field,
            })
        };
        if state.method != fresh.method {
            return conflict("method");
        }
        if state.domains != fresh.domains {
            return conflict("domains");
        }
        if state.grid != fresh.grid {
            return conflict("grid");
        }
        if state.seeds != fresh.seeds {
            return conflict("seeds");
        }
        Ok(state)
    }

    pub fn is_decided(&self, stage: u8) -> bool {
        match stage {
            1 => self.stage1.is_some(),
            2 => self.stage2.is_some(),
            _ => self.stage3.is_some(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.final_model.is_some()
    }

    /// The final model: the stage-3 winner, or the stage-2 winner when
    /// stage 3 was skipped.
    pub(crate) fn finalize(&mut self) {
        let pick = match (&self.stage3, &self.stage2) {
            (Some(Stage3Outcome::Decided(d)), _) => Some((3, d)),
            (Some(Stage3Outcome::Skipped), Some(d)) => Some((2, d)),
            _ => None,
        };
        if let Some((stage, d)) = pick {
            self.final_model = Some(FinalModel {
                stage,
                gamma: d.gamma,
                score: d.score,
                model_ids: d.model_ids.clone(),
            });
        }
    }
}

/// Default selection tasks: every task the first scored entry reports.
pub(crate) fn resolve_selection_tasks(
    cfg: &PipelineConfig,
    manifest: &SweepManifest,
) -> Result<Vec<String>, PipelineError> {
    if let Some(tasks) = &cfg.selection_tasks {
        return Ok(tasks.clone());
    }
    let first = manifest.entries.first().ok_or(PipelineError::MissingDecision(1))?;
    let row = first.scores.as_ref().ok_or_else(|| PipelineError::MissingScores {
        stage: manifest.stage,
        model_id: first.model_id.clone(),
    })?;
    if row.is_empty() {
        return Err(PipelineError::Selection(format!(
            "`{}` reports no tasks",
            first.model_id
        )));
    }
    Ok(row.keys().cloned().collect())
}

fn selection_score(stage: u8, entry: &ManifestEntry, tasks: &[String]) -> Result<f64, PipelineError> {
    let row = entry.scores.as_ref().ok_or_else(|| PipelineError::MissingScores {
        stage,
        model_id: entry.model_id.clone(),
    })?;
    let mut sum = 0.0;
    for task in tasks {
        let s = row.get(task).copied().ok_or_else(|| MetricsError::MissingCell {
            model: entry.model_id.clone(),
            task: task.clone(),
        })?;
        if !s.is_finite() {
            return Err(MetricsError::NonFinite {
                model: entry.model_id.clone(),
                task: task.clone(),
            }
            .into());
        }
        sum += s;
    }
    Ok(sum / tasks.len() as f64)
}

struct Sweep {
    points: Vec<GammaScore>,
    best: GammaScore,
    best_ids: Vec<String>,
}

/// Averages chains per grid value and picks the best grid value among
/// `entries`, which must all share the same domains.
fn sweep(
    cfg: &PipelineConfig,
    stage: u8,
    entries: &[&ManifestEntry],
    tasks: &[String],
    model_scores: &mut BTreeMap<String, f64>,
) -> Result<Sweep, PipelineError> {
    let mut points = Vec::with_capacity(cfg.grid.len());
    for &gamma in &cfg.grid {
        let chain: Vec<&&ManifestEntry> = entries.iter().filter(|e| e.gamma == gamma).collect();
        let mut total = 0.0;
        for e in &chain {
            let s = selection_score(stage, e, tasks)?;
            model_scores.insert(e.model_id.clone(), s);
            total += s;
        }
        points.push(GammaScore {
            gamma,
            score: total / chain.len() as f64,
        });
    }
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.gamma, p.score)).collect();
    let gamma = select_best(&pairs)?;
    let best = points
        .iter()
        .find(|p| p.gamma == gamma)
        .cloned()
        .expect("selected from points");
    let best_ids = entries
        .iter()
        .filter(|e| e.gamma == gamma)
        .map(|e| e.model_id.clone())
        .collect();
    Ok(Sweep {
        points,
        best,
        best_ids,
    })
}

/// Best grid value per domain, then the top-two domains and the remaining
/// best domain.
pub fn decide_stage1(
    cfg: &PipelineConfig,
    manifest: &SweepManifest,
    tasks: &[String],
) -> Result<Stage1Decision, PipelineError> {
    let mut model_scores = BTreeMap::new();
    let mut per_domain = Vec::with_capacity(cfg.domains.len());
    for domain in cfg.domains.keys() {
        let entries: Vec<&ManifestEntry> = manifest
            .entries
            .iter()
            .filter(|e| e.domains.len() == 1 && &e.domains[0] == domain)
            .collect();
        let s = sweep(cfg, 1, &entries, tasks, &mut model_scores)?;
        per_domain.push(DomainBest {
            domain: domain.clone(),
            gamma: s.best.gamma,
            score: s.best.score,
            model_ids: s.best_ids,
            sweep: s.points,
        });
    }
    let best_scores: Vec<(String, f64)> = per_domain
        .iter()
        .map(|b| (b.domain.clone(), b.score))
        .collect();
    if best_scores.len() < 2 {
        return Err(PipelineError::Selection(format!(
            "need at least two domains, got {}",
            best_scores.len()
        )));
    }
    let ranking = rank_domains(&best_scores, &cfg.tie_order())?;
    Ok(Stage1Decision {
        per_domain,
        pair: (ranking[0].clone(), ranking[1].clone()),
        remaining: ranking.get(2).cloned(),
        ranking,
        model_scores,
    })
}

/// Best grid value of a stage-2 or stage-3 sweep.
pub fn decide_sweep(
    cfg: &PipelineConfig,
    manifest: &SweepManifest,
    tasks: &[String],
) -> Result<SweepDecision, PipelineError> {
    let mut model_scores = BTreeMap::new();
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    let s = sweep(cfg, manifest.stage, &entries, tasks, &mut model_scores)?;
    Ok(SweepDecision {
        gamma: s.best.gamma,
        score: s.best.score,
        model_ids: s.best_ids,
        sweep: s.points,
        model_scores,
    })
}
