//! Shared option plumbing: the TOML config file, flag/file/default merging,
//! config fingerprints, and atomic output writing.
//!
//! Every parameter can come from three places with fixed precedence:
//! explicit command-line flag, then the `--config` TOML file, then the
//! built-in default. The TOML file is one flat table whose keys mirror the
//! flag names; unknown keys are rejected so a typo cannot silently fall
//! back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use opsa_core::attacks::{AttackBudget, Norm};
use opsa_core::seeds::content_hash;
use serde::{Deserialize, Serialize};

use crate::{config_err, runtime_err, CliError};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_RADIUS: f64 = 8.0 / 255.0;
pub const DEFAULT_STEPS: usize = 10;
pub const DEFAULT_ETA: f64 = 2.0 / 255.0;
pub const DEFAULT_STEP_SIZE: f64 = 2.0 / 255.0;
pub const DEFAULT_T1: f64 = 1.0;
pub const DEFAULT_T2: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_CAL_FRAC: f64 = 0.5;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_PRETRAIN_EPOCHS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormOpt {
    Linf,
    L2,
}

impl From<NormOpt> for Norm {
    fn from(value: NormOpt) -> Self {
        match value {
            NormOpt::Linf => Norm::Linf,
            NormOpt::L2 => Norm::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerOpt {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeOpt {
    Standard,
    PgdAt,
    OpsaAt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodOpt {
    Fgsm,
    Pgd,
    Opsa,
}

/// The flat `--config` TOML table. One struct serves every subcommand;
/// each reads the keys it understands, and unknown keys fail parsing.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub alpha: Option<f64>,
    pub r: Option<f64>,
    pub norm: Option<NormOpt>,
    pub steps: Option<usize>,
    pub eta: Option<f64>,
    pub step_size: Option<f64>,
    pub t1: Option<f64>,
    pub t1_values: Option<Vec<f64>>,
    pub t2: Option<f64>,
    pub lambda: Option<f64>,
    pub cal_frac: Option<f64>,
    pub frac: Option<[f64; 3]>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub lr: Option<f64>,
    pub optimizer: Option<OptimizerOpt>,
    pub seed: Option<u64>,
    #[serde(rename = "box")]
    pub bounds: Option<[f64; 2]>,
    pub no_box: Option<bool>,
    pub attack_cal: Option<bool>,
    pub pretrain_epochs: Option<usize>,
    pub mode: Option<ModeOpt>,
    pub method: Option<MethodOpt>,
    pub classes: Option<usize>,
    pub dim: Option<usize>,
    pub per_class: Option<usize>,
    pub spread: Option<f64>,
    pub label_column: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| config_err(format!("config {}: {e}", p.display())))
            }
        }
    }
}

/// Flag value, else file value, else default.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Resolve the box flags into attack bounds.
pub fn resolve_bounds(
    flag_box: Option<(f64, f64)>,
    flag_no_box: bool,
    file: &FileConfig,
) -> Result<Option<(f64, f64)>, CliError> {
    if flag_no_box {
        return Ok(None);
    }
    if let Some(b) = flag_box {
        return Ok(Some(b));
    }
    if file.no_box == Some(true) {
        return Ok(None);
    }
    if let Some([lo, hi]) = file.bounds {
        if !(lo < hi) {
            return Err(config_err(format!("box [{lo},{hi}] is empty")));
        }
        return Ok(Some((lo, hi)));
    }
    Ok(Some((0.0, 1.0)))
}

/// Parse a `--box lo,hi` flag value.
pub fn parse_box(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected lo,hi".to_string());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| "lo is not a number")?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| "hi is not a number")?;
    if !(lo < hi) {
        return Err(format!("box [{lo},{hi}] is empty"));
    }
    Ok((lo, hi))
}

pub fn budget_from(r: f64, norm: NormOpt, bounds: Option<(f64, f64)>) -> AttackBudget {
    AttackBudget {
        r,
        norm: norm.into(),
        bounds,
    }
}

/// Fingerprint of a resolved configuration: the FNV-1a hash of its
/// canonical JSON (sorted keys), as fixed-width hex.
pub fn fingerprint<T: Serialize>(resolved: &T) -> Result<String, CliError> {
    let value = serde_json::to_value(resolved)
        .map_err(|e| runtime_err(format!("fingerprint serialization: {e}")))?;
    let canonical = canonical_json(&value);
    Ok(format!("{:016x}", content_hash(canonical.as_bytes())))
}

fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let fields: Vec<String> = keys
                .iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).unwrap(),
                        canonical_json(&map[*k])
                    )
                })
                .collect();
            format!("{{{}}}", fields.join(","))
        }
        serde_json::Value::Array(items) => {
            let fields: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", fields.join(","))
        }
        other => other.to_string(),
    }
}

/// Write bytes to `path` atomically: temp file in the same directory, then
/// rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .map_err(|e| runtime_err(format!("temp file in {}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .map_err(|e| runtime_err(format!("write {}: {e}", path.display())))?;
    tmp.flush()
        .map_err(|e| runtime_err(format!("flush {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| runtime_err(format!("rename into {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<opsa_core::models::Mlp, CliError> {
    opsa_core::models::Mlp::load(path)
        .map_err(|e| runtime_err(format!("model {}: {e}", path.display())))
}

pub fn load_dataset(path: &Path, label_column: &str) -> Result<opsa_core::data::Dataset, CliError> {
    let schema = opsa_core::data::CsvSchema {
        label_column: label_column.to_string(),
        normalize: None,
    };
    opsa_core::data::load_csv(path, &schema)
        .map_err(|e| runtime_err(format!("dataset {}: {e}", path.display())))
}
