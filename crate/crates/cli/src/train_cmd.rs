//! `opsa train`: fit a classifier in standard, pgd-at, or opsa-at mode.

use std::path::PathBuf;

use clap::Args;
use opsa_core::attacks::OpsaConfig;
use opsa_core::conformal::LossWeights;
use opsa_core::models::{Mlp, MlpConfig};
use opsa_core::training::{
    train_opsa_at, train_pgd_at, train_standard, EpochStats, OptimizerKind, TrainConfig,
    TrainOutput,
};
use serde::Serialize;

use crate::opts::{self, FileConfig, ModeOpt, NormOpt, OptimizerOpt};
use crate::report::to_json_bytes;
use crate::{config_err, runtime_err, CliError};

#[derive(Args)]
pub struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output model path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Output training report path (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Optional held-out CSV monitored after each epoch.
    #[arg(long)]
    monitor: Option<PathBuf>,
    /// TOML file supplying any of the other parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training mode.
    #[arg(long, value_enum)]
    mode: Option<ModeOpt>,
    /// Starting model for opsa-at (skips pre-training).
    #[arg(long)]
    init_model: Option<PathBuf>,
    /// Clean pre-training epochs before opsa-at when no starting model is given.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Attack radius.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormOpt>,
    /// Attack iteration count (both pgd and the set-size attack).
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
    /// Training loss temperature T2.
    #[arg(long)]
    t2: Option<f64>,
    /// Set-size penalty weight λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Portion of each batch held out for calibration.
    #[arg(long)]
    cal_frac: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerOpt>,
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinate box as `lo,hi` (default 0,1).
    #[arg(long, value_parser = opts::parse_box)]
    r#box: Option<(f64, f64)>,
    /// Disable the coordinate box entirely.
    #[arg(long, conflicts_with = "box")]
    no_box: bool,
    /// Perturb the calibration slice as well during opsa-at.
    #[arg(long)]
    attack_cal: bool,
    /// Label column name in the CSV.
    #[arg(long)]
    label_column: Option<String>,
}

/// Resolved semantic parameters; the fingerprint ignores file paths.
#[derive(Serialize)]
struct ResolvedTrain {
    command: String,
    mode: ModeOpt,
    hidden: Vec<usize>,
    alpha: f64,
    r: f64,
    norm: NormOpt,
    steps: usize,
    eta: f64,
    step_size: f64,
    t1: f64,
    t2: f64,
    lambda: f64,
    cal_frac: f64,
    batch: usize,
    epochs: usize,
    lr: f64,
    optimizer: OptimizerOpt,
    seed: u64,
    bounds: Option<(f64, f64)>,
    attack_cal: bool,
    pretrain_epochs: usize,
}

#[derive(Serialize)]
struct EpochJson {
    epoch: usize,
    mean_loss: f64,
    mean_tau: Option<f64>,
    sentinel_batches: usize,
    monitor_coverage: Option<f64>,
    monitor_avg_size: Option<f64>,
}

impl From<&EpochStats> for EpochJson {
    fn from(s: &EpochStats) -> Self {
        Self {
            epoch: s.epoch,
            mean_loss: s.mean_loss,
            mean_tau: s.mean_tau,
            sentinel_batches: s.sentinel_batches,
            monitor_coverage: s.monitor_coverage,
            monitor_avg_size: s.monitor_avg_size,
        }
    }
}

#[derive(Serialize)]
struct TrainReportJson {
    format_version: u32,
    command: String,
    mode: ModeOpt,
    fingerprint: String,
    seed: u64,
    data: String,
    model_out: String,
    pretrain_epochs: usize,
    epochs: Vec<EpochJson>,
    warnings: Vec<String>,
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mode = opts::pick(args.mode, file.mode, ModeOpt::Standard);
    let bounds = opts::resolve_bounds(args.r#box, args.no_box, &file)?;
    let resolved = ResolvedTrain {
        command: "train".to_string(),
        mode,
        hidden: opts::pick(args.hidden.clone(), file.hidden.clone(), vec![32]),
        alpha: opts::pick(args.alpha, file.alpha, opts::DEFAULT_ALPHA),
        r: opts::pick(args.r, file.r, opts::DEFAULT_RADIUS),
        norm: opts::pick(args.norm, file.norm, NormOpt::Linf),
        steps: opts::pick(args.steps, file.steps, opts::DEFAULT_STEPS),
        eta: opts::pick(args.eta, file.eta, opts::DEFAULT_ETA),
        step_size: opts::pick(args.step_size, file.step_size, opts::DEFAULT_STEP_SIZE),
        t1: opts::pick(args.t1, file.t1, opts::DEFAULT_T1),
        t2: opts::pick(args.t2, file.t2, opts::DEFAULT_T2),
        lambda: opts::pick(args.lambda, file.lambda, opts::DEFAULT_LAMBDA),
        cal_frac: opts::pick(args.cal_frac, file.cal_frac, opts::DEFAULT_CAL_FRAC),
        batch: opts::pick(args.batch, file.batch, opts::DEFAULT_BATCH),
        epochs: opts::pick(args.epochs, file.epochs, opts::DEFAULT_EPOCHS),
        lr: opts::pick(args.lr, file.lr, opts::DEFAULT_LR),
        optimizer: opts::pick(args.optimizer, file.optimizer, OptimizerOpt::Sgd),
        seed: opts::pick(args.seed, file.seed, 0),
        bounds,
        attack_cal: args.attack_cal || file.attack_cal.unwrap_or(false),
        pretrain_epochs: opts::pick(
            args.pretrain_epochs,
            file.pretrain_epochs,
            opts::DEFAULT_PRETRAIN_EPOCHS,
        ),
    };
    if mode == ModeOpt::OpsaAt && args.init_model.is_none() && resolved.pretrain_epochs == 0 {
        return Err(config_err(
            "opsa-at needs a starting model: give --init-model or a positive --pretrain-epochs",
        ));
    }
    let fingerprint = opts::fingerprint(&resolved)?;

    let label_column = opts::pick(
        args.label_column.clone(),
        file.label_column.clone(),
        "label".to_string(),
    );
    let data = opts::load_dataset(&args.data, &label_column)?;
    let monitor = args
        .monitor
        .as_deref()
        .map(|p| opts::load_dataset(p, &label_column))
        .transpose()?;

    let config = TrainConfig {
        model: MlpConfig {
            input_dim: data.dim(),
            hidden: resolved.hidden.clone(),
            num_classes: data.num_classes(),
        },
        epochs: resolved.epochs,
        batch_size: resolved.batch,
        cal_fraction: resolved.cal_frac,
        alpha: resolved.alpha,
        weights: LossWeights::new(resolved.lambda, resolved.t2).map_err(config_err)?,
        budget: opts::budget_from(resolved.r, resolved.norm, resolved.bounds),
        attack: OpsaConfig {
            t1: resolved.t1,
            steps: resolved.steps,
            eta: resolved.eta,
            ..OpsaConfig::default()
        },
        pgd_steps: resolved.steps,
        pgd_step_size: resolved.step_size,
        optimizer: match resolved.optimizer {
            OptimizerOpt::Sgd => OptimizerKind::Sgd { lr: resolved.lr },
            OptimizerOpt::Adam => OptimizerKind::Adam { lr: resolved.lr },
        },
        seed: resolved.seed,
        attack_calibration: resolved.attack_cal,
    };
    config.validate().map_err(config_err)?;

    let output = run_mode(
        mode,
        &data,
        &config,
        &resolved,
        args.init_model.as_deref(),
        monitor.as_ref(),
    )?;

    opts::atomic_write(&args.out, output.model.to_json().as_bytes())?;
    let report = TrainReportJson {
        format_version: 1,
        command: "train".to_string(),
        mode,
        fingerprint,
        seed: resolved.seed,
        data: args.data.display().to_string(),
        model_out: args.out.display().to_string(),
        pretrain_epochs: if mode == ModeOpt::OpsaAt {
            resolved.pretrain_epochs
        } else {
            0
        },
        epochs: output.epochs.iter().map(EpochJson::from).collect(),
        warnings: output.warnings.clone(),
    };
    opts::atomic_write(&args.report, &to_json_bytes(&report)?)?;
    for warning in &output.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "trained {:?} model for {} epochs -> {}",
        mode,
        output.epochs.len(),
        args.out.display()
    );
    Ok(())
}

fn run_mode(
    mode: ModeOpt,
    data: &opsa_core::data::Dataset,
    config: &TrainConfig,
    resolved: &ResolvedTrain,
    init_model: Option<&std::path::Path>,
    monitor: Option<&opsa_core::data::Dataset>,
) -> Result<TrainOutput, CliError> {
    match mode {
        ModeOpt::Standard => train_standard(data, config, monitor).map_err(runtime_err),
        ModeOpt::PgdAt => train_pgd_at(data, config, monitor).map_err(runtime_err),
        ModeOpt::OpsaAt => {
            let init: Mlp = match init_model {
                Some(path) => opts::load_model(path)?,
                None => {
                    let mut pre_config = config.clone();
                    pre_config.epochs = resolved.pretrain_epochs;
                    let pre = train_standard(data, &pre_config, None).map_err(runtime_err)?;
                    pre.model
                }
            };
            train_opsa_at(data, config, init, monitor).map_err(runtime_err)
        }
    }
}
