use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::Serialize;

use super::config::EvaluatorConfig;
use super::manifest::{plan_stage1, plan_stage2, plan_stage3, EntryStatus, ManifestEntry, SweepManifest};
use super::state::{
    decide_stage1, decide_sweep, resolve_selection_tasks, Failure, PipelineState, Stage3Outcome,
};
use super::{PipelineConfig, PipelineError};
use crate::checkpoint::MODEL_ID_KEY;
use crate::merge::execute_recipe;
use crate::metrics::{ScoreRow, ScoreTable};

pub enum RunMode {
    /// Write the manifest of the next undecided stage and stop.
    Plan,
    /// Merge, evaluate and decide every remaining stage.
    Execute,
    /// Take scores from a table instead of merging and evaluating.
    Resume(ScoreTable),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Planned { stage: u8, manifest: PathBuf },
    /// The score table covers none of this stage's models yet.
    AwaitingScores { stage: u8, manifest: PathBuf },
    Complete,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: Outcome,
    pub state: PipelineState,
    pub state_path: PathBuf,
}

/// Drives the pipeline from its persisted state. Decided stages are never
/// revisited; manifests are saved after every entry change so an interrupted
/// run picks up where it stopped.
pub fn run(
    cfg: &PipelineConfig,
    mode: RunMode,
    state_path: Option<&Path>,
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    if !matches!(mode, RunMode::Plan) && cfg.domains.len() < 2 {
        return Err(PipelineError::Config(
            "a full pipeline needs at least two domains".into(),
        ));
    }
    let out_dir = cfg.output_path();
    let state_path = state_path.map_or_else(|| out_dir.join("state.json"), Path::to_path_buf);
    let mut state = PipelineState::open(&state_path, cfg)?;
    let report = |outcome, state: PipelineState, path: &Path| RunReport {
        outcome,
        state,
        state_path: path.to_path_buf(),
    };

    for stage in 1..=3u8 {
        if state.is_decided(stage) {
            continue;
        }
        let planned = match stage {
            1 => Some(plan_stage1(cfg)?),
            2 => Some(plan_stage2(&state, cfg)?),
            _ => plan_stage3(&state, cfg)?,
        };
        let Some(planned) = planned else {
            state.stage3 = Some(Stage3Outcome::Skipped);
            continue;
        };
        let manifest_path = out_dir.join(SweepManifest::file_name(stage));
        let mut manifest = planned.reconcile(&manifest_path)?;
        manifest.save(&manifest_path)?;

        match &mode {
            RunMode::Plan => {
                state.save(&state_path)?;
                let outcome = Outcome::Planned {
                    stage,
                    manifest: manifest_path,
                };
                return Ok(report(outcome, state, &state_path));
            }
            RunMode::Execute => {
                if let Err(e) = execute_stage(cfg, &mut manifest, &manifest_path) {
                    if let PipelineError::Evaluator { model_id, message } = &e {
                        state.last_error = Some(Failure {
                            model_id: model_id.clone(),
                            message: message.clone(),
                        });
                        state.save(&state_path)?;
                    }
                    return Err(e);
                }
            }
            RunMode::Resume(table) => {
                if !ingest(&mut manifest, table)? {
                    state.save(&state_path)?;
                    let outcome = Outcome::AwaitingScores {
                        stage,
                        manifest: manifest_path,
                    };
                    return Ok(report(outcome, state, &state_path));
                }
                manifest.save(&manifest_path)?;
            }
        }

        let tasks = match &state.selection_tasks {
            Some(tasks) => tasks.clone(),
            None => resolve_selection_tasks(cfg, &manifest)?,
        };
        match stage {
            1 => state.stage1 = Some(decide_stage1(cfg, &manifest, &tasks)?),
            2 => state.stage2 = Some(decide_sweep(cfg, &manifest, &tasks)?),
            _ => state.stage3 = Some(Stage3Outcome::Decided(decide_sweep(cfg, &manifest, &tasks)?)),
        }
        state.selection_tasks = Some(tasks);
        state.last_error = None;
        log::info!("stage {stage} decided");
        state.save(&state_path)?;
    }

    state.finalize();
    state.last_error = None;
    state.save(&state_path)?;
    Ok(report(Outcome::Complete, state, &state_path))
}

/// Copies scores for unscored entries from `table`. Returns `false` when the
/// table has none of them; a table covering only some of them is an error.
fn ingest(manifest: &mut SweepManifest, table: &ScoreTable) -> Result<bool, PipelineError> {
    let pending: Vec<&mut ManifestEntry> = manifest
        .entries
        .iter_mut()
        .filter(|e| e.scores.is_none())
        .collect();
    if pending.is_empty() {
        return Ok(true);
    }
    if !pending.iter().any(|e| table.contains_model(&e.model_id)) {
        return Ok(false);
    }
    if let Some(missing) = pending.iter().find(|e| !table.contains_model(&e.model_id)) {
        return Err(PipelineError::MissingScores {
            stage: manifest.stage,
            model_id: missing.model_id.clone(),
        });
    }
    for entry in pending {
        entry.scores = Some(table.models[&entry.model_id].clone());
        entry.status = EntryStatus::Scored;
    }
    Ok(true)
}

fn execute_stage(
    cfg: &PipelineConfig,
    manifest: &mut SweepManifest,
    manifest_path: &Path,
) -> Result<(), PipelineError> {
    let evaluator = cfg.evaluator.as_ref().ok_or_else(|| {
        PipelineError::Config("execute mode needs an evaluator command".into())
    })?;
    for i in 0..manifest.entries.len() {
        let entry = &mut manifest.entries[i];
        if entry.status == EntryStatus::Planned {
            log::info!("merging {}", entry.model_id);
            create_parent(Path::new(&entry.output))?;
            let metadata = BTreeMap::from([
                (MODEL_ID_KEY.to_string(), entry.model_id.clone()),
                ("merge_method".to_string(), entry.recipe.method.to_string()),
            ]);
            execute_recipe(&entry.recipe, &entry.output, &metadata)?;
            entry.status = EntryStatus::Merged;
            manifest.save(manifest_path)?;
        }
        let entry = &mut manifest.entries[i];
        if entry.scores.is_none() {
            log::info!("evaluating {}", entry.model_id);
            entry.scores = Some(evaluate(cfg, evaluator, entry)?);
            entry.status = EntryStatus::Scored;
            manifest.save(manifest_path)?;
        }
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<(), PipelineError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        }),
        None => Ok(()),
    }
}

fn evaluate(
    cfg: &PipelineConfig,
    evaluator: &EvaluatorConfig,
    entry: &ManifestEntry,
) -> Result<ScoreRow, PipelineError> {
    let fail = |message: String| PipelineError::Evaluator {
        model_id: entry.model_id.clone(),
        message,
    };
    let out = cfg
        .output_path()
        .join("scores")
        .join(format!("{}.json", entry.model_id));
    create_parent(&out)?;
    if out.exists() {
        fs::remove_file(&out).map_err(|source| PipelineError::Io {
            path: out.clone(),
            source,
        })?;
    }
    let out_str = out.to_string_lossy();
    let tasks = cfg
        .selection_tasks
        .as_ref()
        .map(|t| t.join(","))
        .unwrap_or_default();
    let args: Vec<String> = evaluator
        .command
        .iter()
        .map(|a| {
            a.replace("{checkpoint}", &entry.output)
                .replace("{out}", &out_str)
                .replace("{model_id}", &entry.model_id)
                .replace("{tasks}", &tasks)
        })
        .collect();
    let output = Command::new(&args[0])
        .args(&args[1..])
        .stdin(Stdio::null())
        .output()
        .map_err(|e| fail(format!("cannot start `{}`: {e}", args[0])))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(fail(format!("{} ({})", output.status, stderr.trim())));
    }
    let table = ScoreTable::load(&out).map_err(|e| fail(format!("malformed score output: {e}")))?;
    table
        .models
        .get(&entry.model_id)
        .cloned()
        .ok_or_else(|| fail("score output has no entry for this model".into()))
}
