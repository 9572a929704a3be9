//! `opsa gen-data`: synthetic Gaussian-blob dataset generation.

use std::path::PathBuf;

use clap::Args;
use opsa_core::data::gen_blobs;
use serde::Serialize;

use crate::opts::{self, FileConfig};
use crate::report::to_json_bytes;
use crate::{config_err, runtime_err, CliError};

#[derive(Args)]
pub struct GenArgs {
    /// Output CSV path; a `<path>.meta.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// TOML file supplying any of the other parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Standard deviation of each blob.
    #[arg(long)]
    spread: Option<f64>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinate box as `lo,hi`.
    #[arg(long, value_parser = opts::parse_box)]
    r#box: Option<(f64, f64)>,
}

/// Resolved generation parameters; serialized for the fingerprint and the
/// sidecar.
#[derive(Serialize)]
struct GenConfig {
    command: String,
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    bounds: (f64, f64),
    seed: u64,
}

#[derive(Serialize)]
struct GenSidecar {
    format_version: u32,
    fingerprint: String,
    seed: u64,
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    bounds: (f64, f64),
    label_names: Vec<String>,
    provenance: String,
}

pub fn run(args: GenArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let resolved = GenConfig {
        command: "gen-data".to_string(),
        classes: opts::pick(args.classes, file.classes, 4),
        dim: opts::pick(args.dim, file.dim, 2),
        per_class: opts::pick(args.per_class, file.per_class, 100),
        spread: opts::pick(args.spread, file.spread, 0.05),
        bounds: opts::pick(args.r#box, file.bounds.map(|[lo, hi]| (lo, hi)), (0.0, 1.0)),
        seed: opts::pick(args.seed, file.seed, 0),
    };
    if resolved.classes < 2 {
        return Err(config_err("need at least 2 classes"));
    }
    if resolved.dim == 0 {
        return Err(config_err("dimension must be at least 1"));
    }
    if resolved.per_class == 0 {
        return Err(config_err("per-class count must be at least 1"));
    }
    if !(resolved.spread > 0.0 && resolved.spread.is_finite()) {
        return Err(config_err(format!(
            "spread must be positive, got {}",
            resolved.spread
        )));
    }
    let (lo, hi) = resolved.bounds;
    if !(lo < hi) {
        return Err(config_err(format!("box [{lo},{hi}] is empty")));
    }
    let fingerprint = opts::fingerprint(&resolved)?;

    let data = gen_blobs(
        resolved.classes,
        resolved.dim,
        resolved.per_class,
        resolved.spread,
        resolved.bounds,
        resolved.seed,
    )
    .map_err(runtime_err)?;

    let csv = data.csv_bytes().map_err(runtime_err)?;
    opts::atomic_write(&args.out, &csv)?;

    let sidecar = GenSidecar {
        format_version: 1,
        fingerprint,
        seed: resolved.seed,
        classes: resolved.classes,
        dim: resolved.dim,
        per_class: resolved.per_class,
        spread: resolved.spread,
        bounds: resolved.bounds,
        label_names: data.label_names().to_vec(),
        provenance: data.provenance().to_string(),
    };
    let sidecar_path = sidecar_path(&args.out);
    opts::atomic_write(&sidecar_path, &to_json_bytes(&sidecar)?)?;
    println!(
        "wrote {} rows to {} (sidecar {})",
        data.len(),
        args.out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn sidecar_path(out: &std::path::Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}
