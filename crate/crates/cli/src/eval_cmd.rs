//! `opsa evaluate`: calibrate a threshold on one CSV, score another, and
//! write the JSON summary plus the per-sample set CSV.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use crate::opts::{self, FileConfig};
use crate::report::{evaluate_pair, per_sample_csv, to_json_bytes, EvalSummary};
use crate::CliError;

#[derive(Args)]
pub struct EvalArgs {
    /// Model to evaluate (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset CSV.
    #[arg(long)]
    cal: PathBuf,
    /// Test dataset CSV.
    #[arg(long)]
    test: PathBuf,
    /// JSON summary output path.
    #[arg(long)]
    out_json: PathBuf,
    /// Per-sample CSV output path.
    #[arg(long)]
    out_csv: PathBuf,
    /// TOML file supplying any of the other parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Miscoverage level.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Label column name in the CSVs.
    #[arg(long)]
    label_column: Option<String>,
}

#[derive(Serialize)]
struct ResolvedEval {
    command: String,
    alpha: f64,
    seed: u64,
}

pub fn run(args: EvalArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let resolved = ResolvedEval {
        command: "evaluate".to_string(),
        alpha: opts::pick(args.alpha, file.alpha, opts::DEFAULT_ALPHA),
        seed: opts::pick(args.seed, file.seed, 0),
    };
    let fingerprint = opts::fingerprint(&resolved)?;

    let model = opts::load_model(&args.model)?;
    let label_column = opts::pick(
        args.label_column.clone(),
        file.label_column.clone(),
        "label".to_string(),
    );
    let cal = opts::load_dataset(&args.cal, &label_column)?;
    let test = opts::load_dataset(&args.test, &label_column)?;

    let outcome = evaluate_pair(&model, &cal, &test, resolved.alpha)?;
    let summary = EvalSummary::new(
        "evaluate",
        fingerprint,
        resolved.seed,
        resolved.alpha,
        cal.len(),
        &outcome,
    );
    opts::atomic_write(&args.out_json, &to_json_bytes(&summary)?)?;
    opts::atomic_write(
        &args.out_csv,
        &per_sample_csv(&outcome.sets, test.labels())?,
    )?;
    println!(
        "coverage {:.4}, average set size {:.4} over {} test rows -> {}",
        summary.coverage,
        summary.avg_size,
        summary.n_test,
        args.out_json.display()
    );
    Ok(())
}
