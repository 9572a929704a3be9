//! `opsa sweep-t1`: rerun the set-size attack at several temperatures T1
//! against one model and report how the attacked coverage and set size
//! respond. Calibration and test rows are both perturbed, so the table
//! shows the full attacked conformal pipeline per temperature.
//!
//! The CSV leaves `tau` empty when calibration degenerated to the
//! predict-everything sentinel; the JSON carries `null` plus a flag.

use std::path::PathBuf;

use clap::Args;
use opsa_core::attacks::{attack_dataset, perturbed_features, AttackMethod, OpsaConfig};
use opsa_core::data::Dataset;
use opsa_core::derive_seed;
use serde::Serialize;

use crate::opts::{self, FileConfig, NormOpt};
use crate::report::{evaluate_pair, to_json_bytes};
use crate::{config_err, runtime_err, CliError};

#[derive(Args)]
pub struct SweepArgs {
    /// Model to attack (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset CSV.
    #[arg(long)]
    cal: PathBuf,
    /// Test dataset CSV.
    #[arg(long)]
    test: PathBuf,
    /// CSV table output path.
    #[arg(long)]
    out_csv: PathBuf,
    /// JSON summary output path.
    #[arg(long)]
    out_json: PathBuf,
    /// TOML file supplying any of the other parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Temperatures to sweep, comma separated.
    #[arg(long = "t1", value_delimiter = ',')]
    t1: Option<Vec<f64>>,
    /// Miscoverage level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Attack radius.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormOpt>,
    /// Attack iteration count.
    #[arg(long)]
    steps: Option<usize>,
    /// Attack learning rate.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinate box as `lo,hi` (default 0,1).
    #[arg(long, value_parser = opts::parse_box)]
    r#box: Option<(f64, f64)>,
    /// Disable the coordinate box entirely.
    #[arg(long, conflicts_with = "box")]
    no_box: bool,
    /// Label column name in the CSVs.
    #[arg(long)]
    label_column: Option<String>,
}

#[derive(Serialize)]
struct ResolvedSweep {
    command: String,
    t1_values: Vec<f64>,
    alpha: f64,
    r: f64,
    norm: NormOpt,
    steps: usize,
    eta: f64,
    seed: u64,
    bounds: Option<(f64, f64)>,
}

#[derive(Serialize)]
struct SweepRow {
    t1: f64,
    tau: Option<f64>,
    tau_is_sentinel: bool,
    coverage: f64,
    avg_size: f64,
    sscv: f64,
}

#[derive(Serialize)]
struct SweepJson {
    format_version: u32,
    command: String,
    fingerprint: String,
    seed: u64,
    alpha: f64,
    r: f64,
    norm: NormOpt,
    bounds: Option<(f64, f64)>,
    steps: usize,
    eta: f64,
    n_cal: usize,
    n_test: usize,
    rows: Vec<SweepRow>,
    warnings: Vec<String>,
}

pub fn run(args: SweepArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let bounds = opts::resolve_bounds(args.r#box, args.no_box, &file)?;
    let raw_t1 = args
        .t1
        .clone()
        .or_else(|| file.t1_values.clone())
        .unwrap_or_default();
    let (t1_values, warnings) = dedupe_t1(&raw_t1)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let resolved = ResolvedSweep {
        command: "sweep-t1".to_string(),
        t1_values: t1_values.clone(),
        alpha: opts::pick(args.alpha, file.alpha, opts::DEFAULT_ALPHA),
        r: opts::pick(args.r, file.r, opts::DEFAULT_RADIUS),
        norm: opts::pick(args.norm, file.norm, NormOpt::Linf),
        steps: opts::pick(args.steps, file.steps, opts::DEFAULT_STEPS),
        eta: opts::pick(args.eta, file.eta, opts::DEFAULT_ETA),
        seed: opts::pick(args.seed, file.seed, 0),
        bounds,
    };
    let fingerprint = opts::fingerprint(&resolved)?;
    let budget = opts::budget_from(resolved.r, resolved.norm, resolved.bounds);
    budget.validate().map_err(config_err)?;

    let model = opts::load_model(&args.model)?;
    let label_column = opts::pick(
        args.label_column.clone(),
        file.label_column.clone(),
        "label".to_string(),
    );
    let cal = opts::load_dataset(&args.cal, &label_column)?;
    let test = opts::load_dataset(&args.test, &label_column)?;

    // One attack root per split, shared across temperatures, so each T1
    // sees identical starting perturbations and the comparison is paired.
    let cal_root = derive_seed(resolved.seed, "sweep-cal", 0);
    let test_root = derive_seed(resolved.seed, "sweep-test", 0);

    let mut rows = Vec::with_capacity(t1_values.len());
    for &t1 in &t1_values {
        let method = AttackMethod::Opsa(OpsaConfig {
            t1,
            steps: resolved.steps,
            eta: resolved.eta,
            ..OpsaConfig::default()
        });
        let cal_attacked = perturb(&model, &cal, &budget, &method, cal_root)?;
        let test_attacked = perturb(&model, &test, &budget, &method, test_root)?;
        let outcome = evaluate_pair(&model, &cal_attacked, &test_attacked, resolved.alpha)?;
        let sentinel = outcome.calibration.is_sentinel();
        rows.push(SweepRow {
            t1,
            tau: (!sentinel).then_some(outcome.calibration.tau),
            tau_is_sentinel: sentinel,
            coverage: outcome.coverage,
            avg_size: outcome.avg_size,
            sscv: outcome.sscv,
        });
    }

    opts::atomic_write(&args.out_csv, &sweep_csv(&rows)?)?;
    let summary = SweepJson {
        format_version: 1,
        command: "sweep-t1".to_string(),
        fingerprint,
        seed: resolved.seed,
        alpha: resolved.alpha,
        r: resolved.r,
        norm: resolved.norm,
        bounds: resolved.bounds,
        steps: resolved.steps,
        eta: resolved.eta,
        n_cal: cal.len(),
        n_test: test.len(),
        rows,
        warnings,
    };
    opts::atomic_write(&args.out_json, &to_json_bytes(&summary)?)?;
    println!(
        "swept {} temperature(s) over {} calibration / {} test rows -> {}",
        t1_values.len(),
        cal.len(),
        test.len(),
        args.out_csv.display()
    );
    Ok(())
}

/// Validate and dedupe the temperature list, keeping first appearances.
fn dedupe_t1(raw: &[f64]) -> Result<(Vec<f64>, Vec<String>), CliError> {
    if raw.is_empty() {
        return Err(config_err(
            "sweep-t1 needs at least one temperature: give --t1 or the t1_values config key",
        ));
    }
    let mut kept: Vec<f64> = Vec::with_capacity(raw.len());
    let mut warnings = Vec::new();
    for &t1 in raw {
        if !(t1 > 0.0 && t1.is_finite()) {
            return Err(config_err(format!(
                "temperature must be positive and finite, got {t1}"
            )));
        }
        if kept.contains(&t1) {
            warnings.push(format!("duplicate temperature {t1} ignored"));
        } else {
            kept.push(t1);
        }
    }
    Ok((kept, warnings))
}

fn perturb(
    model: &opsa_core::models::Mlp,
    data: &Dataset,
    budget: &opsa_core::attacks::AttackBudget,
    method: &AttackMethod,
    seed: u64,
) -> Result<Dataset, CliError> {
    let outcomes = attack_dataset(model, data, budget, method, seed).map_err(runtime_err)?;
    let features = perturbed_features(data, &outcomes, budget).map_err(runtime_err)?;
    data.with_features(features).map_err(runtime_err)
}

fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, CliError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["t1", "tau", "coverage", "avg_size", "sscv"])
        .map_err(|e| runtime_err(format!("sweep csv: {e}")))?;
    for row in rows {
        writer
            .write_record([
                row.t1.to_string(),
                row.tau.map(|t| t.to_string()).unwrap_or_default(),
                row.coverage.to_string(),
                row.avg_size.to_string(),
                row.sscv.to_string(),
            ])
            .map_err(|e| runtime_err(format!("sweep csv: {e}")))?;
    }
    writer
        .into_inner()
        .map_err(|e| runtime_err(format!("sweep csv: {e}")))
}
