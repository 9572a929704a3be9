//! `opsa split`: cut one labeled CSV into train/calibration/test parts
//! with a seeded permutation.
//!
//! Each part is written label-major. Re-imported CSVs map label names to
//! class indices by first appearance, so the parts must introduce the
//! classes in the same order as each other for a model trained on one part
//! to score another.

use std::path::PathBuf;

use clap::Args;
use opsa_core::data::{split, DataError, Dataset, SplitSpec};

use crate::opts::{self, FileConfig};
use crate::{config_err, runtime_err, CliError};

#[derive(Args)]
pub struct SplitArgs {
    /// Input dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV for the training part.
    #[arg(long)]
    out_train: PathBuf,
    /// Output CSV for the calibration part.
    #[arg(long)]
    out_cal: PathBuf,
    /// Output CSV for the test part.
    #[arg(long)]
    out_test: PathBuf,
    /// TOML file supplying any of the other parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Part fractions as `train,cal,test`; must sum to 1.
    #[arg(long, value_parser = parse_frac)]
    frac: Option<(f64, f64, f64)>,
    #[arg(long)]
    seed: Option<u64>,
    /// Label column name in the CSV.
    #[arg(long)]
    label_column: Option<String>,
}

pub fn run(args: SplitArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let frac = opts::pick(
        args.frac,
        file.frac.map(|[a, b, c]| (a, b, c)),
        (0.6, 0.2, 0.2),
    );
    let seed = opts::pick(args.seed, file.seed, 0);
    let spec = SplitSpec::new(frac.0, frac.1, frac.2, seed).map_err(config_err)?;
    let label_column = opts::pick(
        args.label_column.clone(),
        file.label_column.clone(),
        "label".to_string(),
    );
    let data = opts::load_dataset(&args.data, &label_column)?;

    let parts = split(&data, &spec).map_err(runtime_err)?;
    for (name, part, path) in [
        ("train", &parts.train, &args.out_train),
        ("cal", &parts.cal, &args.out_cal),
        ("test", &parts.test, &args.out_test),
    ] {
        let ordered = label_major(part).map_err(runtime_err)?;
        check_classes_present(name, &ordered, &data)?;
        opts::atomic_write(path, &ordered.csv_bytes().map_err(runtime_err)?)?;
    }
    println!(
        "split {} rows into train {} ({}), cal {} ({}), test {} ({})",
        data.len(),
        parts.train.len(),
        args.out_train.display(),
        parts.cal.len(),
        args.out_cal.display(),
        parts.test.len(),
        args.out_test.display()
    );
    Ok(())
}

/// Parse a `--frac train,cal,test` flag value.
fn parse_frac(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected train,cal,test".to_string());
    }
    let mut vals = [0.0; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|_| format!("{} is not a number", p.trim()))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

/// Stable label-major row order, so the part lists the classes it contains
/// in the source file's order.
fn label_major(part: &Dataset) -> Result<Dataset, DataError> {
    let mut order: Vec<usize> = (0..part.len()).collect();
    order.sort_by_key(|&i| part.labels()[i]);
    part.subset(&order)
}

/// A nonempty part missing a class would re-import with a different label
/// mapping than its siblings; reject the draw instead of writing the file.
fn check_classes_present(name: &str, part: &Dataset, source: &Dataset) -> Result<(), CliError> {
    if part.is_empty() {
        return Ok(());
    }
    let mut seen = vec![false; source.num_classes()];
    for &y in part.labels() {
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(runtime_err(format!(
            "{name} part has no rows of class {}; use a larger fraction or another seed",
            source.label_names()[missing]
        )));
    }
    Ok(())
}
