//! `merge-forge` command-line interface.
//!
//! Every successful command prints one JSON document per line on stdout.
//! Diagnostics go to stderr. Exit codes: 0 success, 2 usage or invalid
//! input, 3 incompatible checkpoints, 4 I/O or file-format error, 5 evaluator
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use merge_forge::checkpoint::{inspect, CheckpointError, DTypePolicy, MODEL_ID_KEY};
use merge_forge::geometry::{distance_files, GeometryError, ParamFilter, NON_LAYER_PATTERNS};
use merge_forge::merge::{execute_recipe, MergeError, MergeMethod, MergeRecipe, RecipeInput};
use merge_forge::metrics::{
    aggregate_tables, build_report, emit_matrix, MatrixFormat, MatrixKind, MetricsError,
    MetricsReport, ScoreTable,
};
use merge_forge::pipeline::{run, Outcome, PipelineConfig, PipelineError, RunMode};

#[derive(Parser)]
#[command(name = "merge-forge", version, about = "Merge checkpoints in weight space")]
struct Cli {
    /// Worker threads for tensor kernels (default: all cores).
    #[arg(long, global = true, env = "MERGE_FORGE_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge one or more models onto a base checkpoint.
    Merge(MergeArgs),
    /// Run the staged merge-and-select pipeline.
    Pipeline {
        #[command(subcommand)]
        action: PipelineAction,
    },
    /// Gain / Outperform Gap / Oracle Retention from a score table.
    Metrics(MetricsArgs),
    /// Normalized L2 distance and cosine similarity between two checkpoints.
    Distance(DistanceArgs),
    /// Print a checkpoint's header summary.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    method: MergeMethod,
    /// Base checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Model checkpoint, optionally with a task-arithmetic weight (PATH:WEIGHT).
    #[arg(long = "model", value_name = "PATH[:WEIGHT]", required = true)]
    models: Vec<String>,
    /// Fraction of task-vector entries kept (ties, dare-ties).
    #[arg(long)]
    density: Option<f64>,
    /// Scale of the merged task vector.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda: f64,
    /// Global DARE seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Density of the TIES step after DARE (1 keeps every surviving entry).
    #[arg(long, default_value_t = 1.0)]
    ties_inner_density: f64,
    #[arg(long)]
    out: PathBuf,
    /// Output dtype: preserve, f32, f16 or bf16.
    #[arg(long, default_value = "preserve")]
    dtype: DTypePolicy,
    /// Model id stored in the output header.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Subcommand)]
enum PipelineAction {
    /// Write the manifest of the next undecided stage without merging.
    Plan(PipelineArgs),
    /// Merge, evaluate and select through every stage.
    Run(PipelineArgs),
    /// Continue from a score table instead of running the evaluator.
    Resume {
        #[command(flatten)]
        common: PipelineArgs,
        /// Score table covering the planned models.
        #[arg(long)]
        scores: PathBuf,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// State file (default: <output_dir>/state.json).
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Score table; repeat to average seeded runs.
    #[arg(long = "scores", required = true)]
    scores: Vec<PathBuf>,
    /// Merged model id; repeat for several rows in a matrix report.
    #[arg(long = "merged", required = true)]
    merged: Vec<String>,
    /// Constituent model ids.
    #[arg(long, value_delimiter = ',', required = true)]
    constituents: Vec<String>,
    /// Write a report: .csv or .md for a matrix, .json for full reports.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Matrix written by --report: gain or og.
    #[arg(long, default_value = "gain")]
    which: MatrixKind,
}

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Glob over tensor names to include (default: all).
    #[arg(long)]
    include: Vec<String>,
    /// Glob over tensor names to exclude.
    #[arg(long)]
    exclude: Vec<String>,
    /// Exclude embedding and output-head tensors.
    #[arg(long)]
    layers_only: bool,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::io(e.to_string())
    }
}

impl From<MergeError> for Failure {
    fn from(e: MergeError) -> Self {
        let code = match &e {
            MergeError::Incompatible { .. } => 3,
            MergeError::Checkpoint(_) => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<GeometryError> for Failure {
    fn from(e: GeometryError) -> Self {
        let code = match &e {
            GeometryError::Checkpoint(_) => 4,
            GeometryError::Missing { .. } | GeometryError::ShapeMismatch { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let code = if matches!(e, MetricsError::Io { .. }) { 4 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Merge(e) => e.into(),
            PipelineError::Metrics(e) => e.into(),
            e @ (PipelineError::Io { .. }
            | PipelineError::Json { .. }
            | PipelineError::StateFormat { .. }) => Failure::io(e.to_string()),
            e @ PipelineError::Evaluator { .. } => Failure {
                code: 5,
                message: e.to_string(),
            },
            e => Failure::usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("outputs serialize"));
}

/// Splits `PATH[:WEIGHT]`; the suffix counts as a weight only if it parses
/// as a number.
fn parse_model_arg(arg: &str) -> RecipeInput {
    if let Some((path, weight)) = arg.rsplit_once(':') {
        if let Ok(weight) = weight.parse::<f64>() {
            if !path.is_empty() {
                return RecipeInput {
                    path: path.to_string(),
                    weight,
                };
            }
        }
    }
    RecipeInput {
        path: arg.to_string(),
        weight: 1.0,
    }
}

#[derive(Serialize)]
struct MergeOutput<'a> {
    method: MergeMethod,
    base: &'a Path,
    inputs: &'a [RecipeInput],
    density: Option<f64>,
    lambda: f64,
    seed: u64,
    ties_inner_density: f64,
    dtype: String,
    output: &'a Path,
    tensors: usize,
    param_count: usize,
}

fn cmd_merge(args: MergeArgs) -> CmdResult {
    let recipe = MergeRecipe {
        method: args.method,
        base: args.base.to_string_lossy().into_owned(),
        inputs: args.models.iter().map(|m| parse_model_arg(m)).collect(),
        density: args.density,
        lambda: args.lambda,
        dare_seed: args.seed,
        ties_inner_density: args.ties_inner_density,
        dtype: args.dtype,
    };
    recipe
        .validate()
        .map_err(|e| Failure::usage(format!("{e} (check --method, --density, --lambda and --model weights)")))?;
    let mut metadata = BTreeMap::from([("merge_method".to_string(), args.method.to_string())]);
    if let Some(id) = &args.id {
        metadata.insert(MODEL_ID_KEY.to_string(), id.clone());
    }
    let summary = execute_recipe(&recipe, &args.out, &metadata)?;
    emit(&MergeOutput {
        method: args.method,
        base: &args.base,
        inputs: &recipe.inputs,
        density: args.density,
        lambda: args.lambda,
        seed: args.seed,
        ties_inner_density: args.ties_inner_density,
        dtype: args.dtype.to_string(),
        output: &args.out,
        tensors: summary.tensors,
        param_count: summary.param_count,
    });
    Ok(())
}

#[derive(Serialize)]
struct PipelineOutput<'a> {
    #[serde(flatten)]
    outcome: &'a Outcome,
    state: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_model: Option<&'a merge_forge::pipeline::FinalModel>,
}

fn cmd_pipeline(action: PipelineAction) -> CmdResult {
    let (common, mode) = match action {
        PipelineAction::Plan(common) => (common, RunMode::Plan),
        PipelineAction::Run(common) => (common, RunMode::Execute),
        PipelineAction::Resume { common, scores } => {
            (common, RunMode::Resume(ScoreTable::load(&scores)?))
        }
    };
    let cfg = PipelineConfig::load(&common.config)?;
    let report = run(&cfg, mode, common.state.as_deref())?;
    emit(&PipelineOutput {
        outcome: &report.outcome,
        state: &report.state_path,
        final_model: report.state.final_model.as_ref(),
    });
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    report: &'a MetricsReport,
    runs: usize,
    max_variance: f64,
}

fn cmd_metrics(args: MetricsArgs) -> CmdResult {
    let tables = args
        .scores
        .iter()
        .map(ScoreTable::load)
        .collect::<Result<Vec<_>, _>>()?;
    let aggregate = aggregate_tables(&tables)?;
    let table = if tables.len() == 1 {
        tables.into_iter().next().expect("one table")
    } else {
        aggregate.mean_table()
    };
    let reports = args
        .merged
        .iter()
        .map(|m| build_report(&table, m, &args.constituents))
        .collect::<Result<Vec<_>, _>>()?;

    if let Some(path) = &args.report {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        let text = match ext {
            "csv" => emit_matrix(&reports, args.which, MatrixFormat::Csv)?,
            "md" => emit_matrix(&reports, args.which, MatrixFormat::Markdown)?,
            "json" => serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n",
            _ => return Err(Failure::usage("--report must end in .csv, .md or .json")),
        };
        fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    }
    for report in &reports {
        emit(&MetricsLine {
            report,
            runs: aggregate.runs,
            max_variance: aggregate.max_variance(),
        });
    }
    Ok(())
}

fn cmd_distance(args: DistanceArgs) -> CmdResult {
    let mut exclude = args.exclude.clone();
    if args.layers_only {
        exclude.extend(NON_LAYER_PATTERNS.iter().map(|p| p.to_string()));
    }
    let filter = ParamFilter::new(&args.include, &exclude)?;
    emit(&distance_files(&args.a, &args.b, &filter)?);
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    emit(&inspect(&args.path)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::Merge(args) => cmd_merge(args),
        Command::Pipeline { action } => cmd_pipeline(action),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Distance(args) => cmd_distance(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
