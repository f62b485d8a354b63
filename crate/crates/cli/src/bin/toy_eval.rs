//! Deterministic stand-in evaluator for exercising `merge-forge pipeline run`.
//!
//! Scores are smooth functions of simple weight statistics, so nearby merges
//! get nearby scores and different hyperparameters rank differently.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use merge_forge::checkpoint::CheckpointReader;
use merge_forge::metrics::ScoreTable;

#[derive(Parser)]
#[command(name = "toy-eval", about = "Score a checkpoint with a synthetic benchmark")]
struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score table to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model_id: String,
    /// Comma-separated task ids.
    #[arg(long, value_delimiter = ',', default_value = "t1,t2,t3")]
    tasks: Vec<String>,
    /// Exit with status 1 when the model id contains this string.
    #[arg(long)]
    fail_on: Option<String>,
    /// Write invalid JSON instead of a score table.
    #[arg(long)]
    malformed: bool,
}

fn weight_stats(path: &PathBuf) -> Result<(f64, f64), String> {
    let mut reader = CheckpointReader::open(path).map_err(|e| e.to_string())?;
    let names: Vec<String> = reader.metas().iter().map(|m| m.name.clone()).collect();
    let (mut sum, mut sum_sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for name in names {
        let values = reader.read_tensor(&name).map_err(|e| e.to_string())?.to_f32();
        for v in values {
            let v = f64::from(v);
            sum += v;
            sum_sq += v * v;
        }
        n += reader.meta(&name).map_or(0, |m| m.numel());
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((sum / n as f64, (sum_sq / n as f64).sqrt()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(pattern) = &args.fail_on {
        if args.model_id.contains(pattern.as_str()) {
            eprintln!("toy-eval: refusing to score {}", args.model_id);
            return ExitCode::from(1);
        }
    }
    let output = if args.malformed {
        "{\"models\": ".to_string()
    } else {
        let (mean, rms) = match weight_stats(&args.checkpoint) {
            Ok(stats) => stats,
            Err(e) => {
                eprintln!("toy-eval: {e}");
                return ExitCode::from(1);
            }
        };
        let mut table = ScoreTable::new(args.tasks.clone());
        for (i, task) in args.tasks.iter().enumerate() {
            let k = (i + 1) as f64;
            let score = 50.0 + 20.0 * (k * mean).sin() + 20.0 * ((k + 1.0) * rms).cos();
            table.insert(&args.model_id, task, score);
        }
        table.to_json()
    };
    if let Err(e) = std::fs::write(&args.out, output) {
        eprintln!("toy-eval: {}: {e}", args.out.display());
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
