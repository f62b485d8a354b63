//! Merge-quality metrics over ingested score tables.
//!
//! Scores are percentage points. Nothing is rounded during computation; only
//! the matrix renderers round, to two decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no score for model `{model}` on task `{task}`")]
    MissingCell { model: String, task: String },
    #[error("score for model `{model}` on task `{task}` is not finite")]
    NonFinite { model: String, task: String },
    #[error("the task list is empty")]
    EmptyTasks,
    #[error("task `{0}` is listed more than once")]
    DuplicateTask(String),
    #[error("at least one constituent model is required")]
    NoConstituents,
    #[error("oracle retention is undefined: the best-constituent scores sum to zero")]
    ZeroOracleDenominator,
    #[error("at least one run is required")]
    EmptyRuns,
    #[error("run {run} covers a different task set than run 0")]
    TaskSetMismatch { run: usize },
    #[error("run {run} covers a different model set than run 0")]
    ModelSetMismatch { run: usize },
    #[error("no reports to render")]
    EmptyReports,
    #[error("report for `{model}` uses a different task order")]
    TaskOrderMismatch { model: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid score table: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("cannot parse matrix: {0}")]
    Parse(String),
}

pub type ScoreRow = BTreeMap<String, f64>;

/// `model_id → task_id → score`, with an explicit task order.
///
/// An evaluator may omit `tasks`; the order then defaults to the sorted union
/// of the tasks it reported.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    #[serde(default)]
    pub tasks: Vec<String>,
    pub models: BTreeMap<String, ScoreRow>,
}

impl ScoreTable {
    pub fn new(tasks: Vec<String>) -> Self {
        Self {
            tasks,
            models: BTreeMap::new(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, MetricsError> {
        let mut table: ScoreTable = serde_json::from_str(json)?;
        if table.tasks.is_empty() {
            let all: BTreeSet<&String> = table.models.values().flat_map(|r| r.keys()).collect();
            table.tasks = all.into_iter().cloned().collect();
        }
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&json)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score tables always serialize")
    }

    /// Checks that task ids are unique and every present score is finite.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.tasks.iter().find(|t| !seen.insert(*t)) {
            return Err(MetricsError::DuplicateTask(dup.clone()));
        }
        for (model, row) in &self.models {
            if let Some((task, _)) = row.iter().find(|(_, s)| !s.is_finite()) {
                return Err(MetricsError::NonFinite {
                    model: model.clone(),
                    task: task.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, model: &str, task: &str, score: f64) {
        self.models
            .entry(model.to_string())
            .or_default()
            .insert(task.to_string(), score);
    }

    pub fn contains_model(&self, model: &str) -> bool {
        self.models.contains_key(model)
    }

    pub fn score(&self, model: &str, task: &str) -> Result<f64, MetricsError> {
        let s = self
            .models
            .get(model)
            .and_then(|row| row.get(task))
            .copied()
            .ok_or_else(|| MetricsError::MissingCell {
                model: model.to_string(),
                task: task.to_string(),
            })?;
        if s.is_finite() {
            Ok(s)
        } else {
            Err(MetricsError::NonFinite {
                model: model.to_string(),
                task: task.to_string(),
            })
        }
    }

    /// Scores of `model` over `tasks`, in that order.
    pub fn row(&self, model: &str, tasks: &[String]) -> Result<Vec<f64>, MetricsError> {
        tasks.iter().map(|t| self.score(model, t)).collect()
    }

    /// Uniform macro-average of `model`'s scores over `tasks`.
    pub fn overall(&self, model: &str, tasks: &[String]) -> Result<f64, MetricsError> {
        if tasks.is_empty() {
            return Err(MetricsError::EmptyTasks);
        }
        Ok(mean(&self.row(model, tasks)?))
    }

    pub fn task_gain(
        &self,
        merged: &str,
        constituents: &[String],
        task: &str,
    ) -> Result<f64, MetricsError> {
        let cs = constituents
            .iter()
            .map(|c| self.score(c, task))
            .collect::<Result<Vec<_>, _>>()?;
        gain(self.score(merged, task)?, &cs)
    }

    pub fn task_outperform_gap(
        &self,
        merged: &str,
        constituents: &[String],
        task: &str,
    ) -> Result<f64, MetricsError> {
        let cs = constituents
            .iter()
            .map(|c| self.score(c, task))
            .collect::<Result<Vec<_>, _>>()?;
        outperform_gap(self.score(merged, task)?, &cs)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Merged score minus the mean constituent score.
pub fn gain(merged: f64, constituents: &[f64]) -> Result<f64, MetricsError> {
    if constituents.is_empty() {
        return Err(MetricsError::NoConstituents);
    }
    Ok(merged - mean(constituents))
}

/// Merged score minus the best constituent score.
pub fn outperform_gap(merged: f64, constituents: &[f64]) -> Result<f64, MetricsError> {
    if constituents.is_empty() {
        return Err(MetricsError::NoConstituents);
    }
    Ok(merged - max(constituents))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub gain: f64,
    pub og: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstituentOverall {
    pub model_id: String,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub merged_id: String,
    pub constituent_ids: Vec<String>,
    /// In task order.
    pub per_task: Vec<TaskMetrics>,
    pub macro_gain: f64,
    pub macro_og: f64,
    pub oracle_retention: f64,
    pub overall_merged: f64,
    pub overall_constituents: Vec<ConstituentOverall>,
}

impl MetricsReport {
    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.per_task.iter().map(|m| m.task.as_str())
    }
}

/// Computes every metric for `merged_id` against `constituent_ids` over the
/// table's task order.
pub fn build_report(
    table: &ScoreTable,
    merged_id: &str,
    constituent_ids: &[String],
) -> Result<MetricsReport, MetricsError> {
    if table.tasks.is_empty() {
        return Err(MetricsError::EmptyTasks);
    }
    if constituent_ids.is_empty() {
        return Err(MetricsError::NoConstituents);
    }
    let merged = table.row(merged_id, &table.tasks)?;
    let rows = constituent_ids
        .iter()
        .map(|c| table.row(c, &table.tasks))
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_task = Vec::with_capacity(table.tasks.len());
    let mut best = Vec::with_capacity(table.tasks.len());
    for (i, task) in table.tasks.iter().enumerate() {
        let column: Vec<f64> = rows.iter().map(|r| r[i]).collect();
        best.push(max(&column));
        per_task.push(TaskMetrics {
            task: task.clone(),
            gain: gain(merged[i], &column)?,
            og: outperform_gap(merged[i], &column)?,
        });
    }

    let denominator: f64 = best.iter().sum();
    if denominator == 0.0 {
        return Err(MetricsError::ZeroOracleDenominator);
    }
    let gains: Vec<f64> = per_task.iter().map(|m| m.gain).collect();
    let ogs: Vec<f64> = per_task.iter().map(|m| m.og).collect();
    Ok(MetricsReport {
        merged_id: merged_id.to_string(),
        constituent_ids: constituent_ids.to_vec(),
        macro_gain: mean(&gains),
        macro_og: mean(&ogs),
        oracle_retention: merged.iter().sum::<f64>() / denominator,
        overall_merged: mean(&merged),
        overall_constituents: constituent_ids
            .iter()
            .zip(&rows)
            .map(|(id, row)| ConstituentOverall {
                model_id: id.clone(),
                overall: mean(row),
            })
            .collect(),
        per_task,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    /// Population variance (divides by the run count).
    pub variance: f64,
}

/// Per-task mean and population variance across seeded runs of one model.
pub fn aggregate_runs(rows: &[ScoreRow]) -> Result<BTreeMap<String, CellStats>, MetricsError> {
    let first = rows.first().ok_or(MetricsError::EmptyRuns)?;
    if let Some(run) = rows
        .iter()
        .position(|r| r.len() != first.len() || !r.keys().eq(first.keys()))
    {
        return Err(MetricsError::TaskSetMismatch { run });
    }
    let n = rows.len() as f64;
    Ok(first
        .keys()
        .map(|task| {
            let values: Vec<f64> = rows.iter().map(|r| r[task]).collect();
            let m = values.iter().sum::<f64>() / n;
            let variance = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            (task.clone(), CellStats { mean: m, variance })
        })
        .collect())
}

/// Aggregate of several runs of the same score table (one per seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub tasks: Vec<String>,
    pub models: BTreeMap<String, BTreeMap<String, CellStats>>,
}

impl RunAggregate {
    pub fn max_variance(&self) -> f64 {
        self.cells().map(|c| c.variance).fold(0.0, f64::max)
    }

    pub fn mean_variance(&self) -> f64 {
        let (sum, count) = self
            .cells()
            .fold((0.0, 0usize), |(s, n), c| (s + c.variance, n + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// The per-cell means as a score table.
    pub fn mean_table(&self) -> ScoreTable {
        ScoreTable {
            tasks: self.tasks.clone(),
            models: self
                .models
                .iter()
                .map(|(m, row)| {
                    let row = row.iter().map(|(t, c)| (t.clone(), c.mean)).collect();
                    (m.clone(), row)
                })
                .collect(),
        }
    }

    fn cells(&self) -> impl Iterator<Item = &CellStats> {
        self.models.values().flat_map(|r| r.values())
    }
}

pub fn aggregate_tables(tables: &[ScoreTable]) -> Result<RunAggregate, MetricsError> {
    let first = tables.first().ok_or(MetricsError::EmptyRuns)?;
    if let Some(run) = tables
        .iter()
        .position(|t| !t.models.keys().eq(first.models.keys()))
    {
        return Err(MetricsError::ModelSetMismatch { run });
    }
    let mut models = BTreeMap::new();
    for model in first.models.keys() {
        let rows: Vec<ScoreRow> = tables.iter().map(|t| t.models[model].clone()).collect();
        models.insert(model.clone(), aggregate_runs(&rows)?);
    }
    Ok(RunAggregate {
        runs: tables.len(),
        tasks: first.tasks.clone(),
        models,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Gain,
    Og,
}

impl FromStr for MatrixKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gain" => Ok(MatrixKind::Gain),
            "og" => Ok(MatrixKind::Og),
            _ => Err(format!("unknown matrix `{s}` (expected gain or og)")),
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixKind::Gain => "gain",
            MatrixKind::Og => "og",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Markdown,
}

/// A parsed model × task matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub tasks: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Two decimals, with negative zero printed as `0.00`.
pub fn format_cell(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn to_matrix(reports: &[MetricsReport], which: MatrixKind) -> Result<Matrix, MetricsError> {
    let first = reports.first().ok_or(MetricsError::EmptyReports)?;
    let tasks: Vec<String> = first.tasks().map(str::to_string).collect();
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        if !r.tasks().eq(tasks.iter().map(String::as_str)) {
            return Err(MetricsError::TaskOrderMismatch {
                model: r.merged_id.clone(),
            });
        }
        let cells = r
            .per_task
            .iter()
            .map(|m| match which {
                MatrixKind::Gain => m.gain,
                MatrixKind::Og => m.og,
            })
            .collect();
        rows.push((r.merged_id.clone(), cells));
    }
    Ok(Matrix { tasks, rows })
}

/// Renders the Gain or OG matrix: one row per merged model, one column per
/// task in task order.
pub fn emit_matrix(
    reports: &[MetricsReport],
    which: MatrixKind,
    format: MatrixFormat,
) -> Result<String, MetricsError> {
    let matrix = to_matrix(reports, which)?;
    match format {
        MatrixFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record(std::iter::once("model").chain(matrix.tasks.iter().map(String::as_str)))?;
            for (model, cells) in &matrix.rows {
                let mut record = vec![model.clone()];
                record.extend(cells.iter().map(|&v| format_cell(v)));
                w.write_record(&record)?;
            }
            let bytes = w.into_inner().map_err(|e| MetricsError::Parse(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        MatrixFormat::Markdown => {
            let mut out = String::new();
            let header: Vec<String> = matrix.tasks.iter().map(|t| md_escape(t)).collect();
            out.push_str(&format!("| model | {} |\n", header.join(" | ")));
            out.push_str(&format!("|---|{}\n", "---:|".repeat(matrix.tasks.len())));
            for (model, cells) in &matrix.rows {
                let cells: Vec<String> = cells.iter().map(|&v| format_cell(v)).collect();
                out.push_str(&format!("| {} | {} |\n", md_escape(model), cells.join(" | ")));
            }
            Ok(out)
        }
    }
}

fn md_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('|', "\\|")
}

fn parse_cells(model: &str, cells: &[String]) -> Result<Vec<f64>, MetricsError> {
    cells
        .iter()
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| MetricsError::Parse(format!("row `{model}`: bad cell `{c}`")))
        })
        .collect()
}

pub fn parse_matrix_csv(text: &str) -> Result<Matrix, MetricsError> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.get(0) != Some("model") {
        return Err(MetricsError::Parse("first column must be `model`".into()));
    }
    let tasks: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let model = record.get(0).unwrap_or_default().to_string();
        let cells: Vec<String> = record.iter().skip(1).map(str::to_string).collect();
        rows.push((model.clone(), parse_cells(&model, &cells)?));
    }
    Ok(Matrix { tasks, rows })
}

/// Splits a markdown table row on unescaped pipes.
fn md_row(line: &str) -> Result<Vec<String>, MetricsError> {
    let line = line.trim();
    let inner = line
        .strip_prefix('|')
        .and_then(|l| l.strip_suffix('|'))
        .ok_or_else(|| MetricsError::Parse(format!("not a table row: `{line}`")))?;
    let mut cells = Vec::new();
    let mut cell = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => cell.extend(chars.next()),
            '|' => cells.push(std::mem::take(&mut cell).trim().to_string()),
            _ => cell.push(c),
        }
    }
    cells.push(cell.trim().to_string());
    Ok(cells)
}

pub fn parse_matrix_markdown(text: &str) -> Result<Matrix, MetricsError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = md_row(lines.next().ok_or(MetricsError::Parse("empty table".into()))?)?;
    if header.first().map(String::as_str) != Some("model") {
        return Err(MetricsError::Parse("first column must be `model`".into()));
    }
    lines.next();
    let tasks = header[1..].to_vec();
    let mut rows = Vec::new();
    for line in lines {
        let cells = md_row(line)?;
        if cells.len() != header.len() {
            return Err(MetricsError::Parse(format!("row has {} cells", cells.len())));
        }
        rows.push((cells[0].clone(), parse_cells(&cells[0], &cells[1..])?));
    }
    Ok(Matrix { tasks, rows })
}
