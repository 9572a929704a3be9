//! `opsa attack`: perturb a labeled CSV under a norm budget and write the
//! perturbed copy plus an optional per-sample log.

use std::path::PathBuf;

use clap::Args;
use opsa_core::attacks::{attack_dataset, perturbed_features, AttackMethod, OpsaConfig};
use opsa_core::data::Dataset;
use serde::Serialize;

use crate::opts::{self, FileConfig, MethodOpt, NormOpt};
use crate::report::to_json_bytes;
use crate::{config_err, runtime_err, CliError};

#[derive(Args)]
pub struct AttackArgs {
    /// Model to attack (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Input dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV of perturbed rows, same schema as the input.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON log with per-sample attack diagnostics.
    #[arg(long)]
    log: Option<PathBuf>,
    /// TOML file supplying any of the other parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodOpt>,
    /// Attack radius.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormOpt>,
    /// Iteration count.
    #[arg(long)]
    steps: Option<usize>,
    /// Set-size attack learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// PGD step size.
    #[arg(long)]
    step_size: Option<f64>,
    /// Attack temperature T1.
    #[arg(long)]
    t1: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinate box as `lo,hi` (default 0,1).
    #[arg(long, value_parser = opts::parse_box)]
    r#box: Option<(f64, f64)>,
    /// Disable the coordinate box entirely.
    #[arg(long, conflicts_with = "box")]
    no_box: bool,
    /// Label column name in the CSV.
    #[arg(long)]
    label_column: Option<String>,
}

#[derive(Serialize)]
struct ResolvedAttack {
    command: String,
    method: MethodOpt,
    r: f64,
    norm: NormOpt,
    steps: usize,
    eta: f64,
    step_size: f64,
    t1: f64,
    seed: u64,
    bounds: Option<(f64, f64)>,
}

#[derive(Serialize)]
struct SampleLog {
    id: usize,
    label: usize,
    iterations: usize,
    converged: bool,
    zero_gradient: bool,
    objective: f64,
}

#[derive(Serialize)]
struct AttackLogJson {
    format_version: u32,
    command: String,
    fingerprint: String,
    seed: u64,
    method: MethodOpt,
    r: f64,
    norm: NormOpt,
    bounds: Option<(f64, f64)>,
    n: usize,
    converged: usize,
    zero_gradient: usize,
    mean_iterations: f64,
    per_sample: Vec<SampleLog>,
}

pub fn run(args: AttackArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let bounds = opts::resolve_bounds(args.r#box, args.no_box, &file)?;
    let resolved = ResolvedAttack {
        command: "attack".to_string(),
        method: opts::pick(args.method, file.method, MethodOpt::Opsa),
        r: opts::pick(args.r, file.r, opts::DEFAULT_RADIUS),
        norm: opts::pick(args.norm, file.norm, NormOpt::Linf),
        steps: opts::pick(args.steps, file.steps, opts::DEFAULT_STEPS),
        eta: opts::pick(args.eta, file.eta, opts::DEFAULT_ETA),
        step_size: opts::pick(args.step_size, file.step_size, opts::DEFAULT_STEP_SIZE),
        t1: opts::pick(args.t1, file.t1, opts::DEFAULT_T1),
        seed: opts::pick(args.seed, file.seed, 0),
        bounds,
    };
    let fingerprint = opts::fingerprint(&resolved)?;
    let budget = opts::budget_from(resolved.r, resolved.norm, resolved.bounds);
    budget.validate().map_err(config_err)?;
    let method = match resolved.method {
        MethodOpt::Fgsm => AttackMethod::Fgsm,
        MethodOpt::Pgd => AttackMethod::Pgd {
            steps: resolved.steps,
            step_size: resolved.step_size,
        },
        MethodOpt::Opsa => AttackMethod::Opsa(OpsaConfig {
            t1: resolved.t1,
            steps: resolved.steps,
            eta: resolved.eta,
            ..OpsaConfig::default()
        }),
    };

    let model = opts::load_model(&args.model)?;
    let label_column = opts::pick(
        args.label_column.clone(),
        file.label_column.clone(),
        "label".to_string(),
    );
    let data = opts::load_dataset(&args.data, &label_column)?;
    check_rows_inside_box(&data, resolved.bounds)?;

    let outcomes =
        attack_dataset(&model, &data, &budget, &method, resolved.seed).map_err(runtime_err)?;
    let perturbed = perturbed_features(&data, &outcomes, &budget).map_err(runtime_err)?;
    let out_data = Dataset::new(
        perturbed,
        data.labels().to_vec(),
        data.dim(),
        data.num_classes(),
        data.label_names().to_vec(),
        resolved.bounds,
        format!(
            "perturbed r={} seed={} from {}",
            resolved.r,
            resolved.seed,
            data.provenance()
        ),
    )
    .map_err(runtime_err)?;
    opts::atomic_write(&args.out, &out_data.csv_bytes().map_err(runtime_err)?)?;

    if let Some(log_path) = &args.log {
        let per_sample: Vec<SampleLog> = outcomes
            .iter()
            .enumerate()
            .map(|(i, o)| SampleLog {
                id: i,
                label: data.labels()[i],
                iterations: o.iterations,
                converged: o.converged,
                zero_gradient: o.zero_gradient,
                objective: o.objective_trace.last().copied().unwrap_or(f64::NAN),
            })
            .collect();
        let log = AttackLogJson {
            format_version: 1,
            command: "attack".to_string(),
            fingerprint: fingerprint.clone(),
            seed: resolved.seed,
            method: resolved.method,
            r: resolved.r,
            norm: resolved.norm,
            bounds: resolved.bounds,
            n: outcomes.len(),
            converged: outcomes.iter().filter(|o| o.converged).count(),
            zero_gradient: outcomes.iter().filter(|o| o.zero_gradient).count(),
            mean_iterations: outcomes.iter().map(|o| o.iterations as f64).sum::<f64>()
                / outcomes.len().max(1) as f64,
            per_sample,
        };
        opts::atomic_write(log_path, &to_json_bytes(&log)?)?;
    }
    println!(
        "attacked {} rows ({:?}, r = {}) -> {}",
        data.len(),
        resolved.method,
        resolved.r,
        args.out.display()
    );
    Ok(())
}

/// Reject rows outside the attack box up front so the error names the row.
fn check_rows_inside_box(data: &Dataset, bounds: Option<(f64, f64)>) -> Result<(), CliError> {
    let Some((lo, hi)) = bounds else {
        return Ok(());
    };
    for (i, x) in data.features().iter().enumerate() {
        for (j, &v) in x.iter().enumerate() {
            if v < lo || v > hi {
                return Err(runtime_err(format!(
                    "row {i}: x{j} = {v} lies outside the box [{lo}, {hi}]"
                )));
            }
        }
    }
    Ok(())
}
