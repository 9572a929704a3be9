//! Dataset container, synthetic blob generation, CSV ingestion, and
//! exchangeability-preserving splits.
//!
//! Class labels are 0-based internally; external label strings are mapped by
//! first appearance and the mapping travels with the dataset, so exporting
//! and re-importing reproduces the exact same container. Splits draw one
//! seeded permutation and cut it by fractions, which keeps calibration and
//! test rows exchangeable by construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seeds::stream_rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: non-finite feature value")]
    NonFinite { line: usize },
    #[error("column {0:?} not found in header")]
    UnknownColumn(String),
    #[error("row {row} has {got} features, expected {expected}")]
    RowLength {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("feature at row {row}, column {col} lies outside the declared box")]
    OutsideBox { row: usize, col: usize },
    #[error("invalid dataset construction: {0}")]
    Invalid(String),
    #[error("split fractions invalid: {0}")]
    InvalidFractions(String),
    #[error("could not place {placed} of {requested} class means with pairwise distance {min_dist}; reduce spread or enlarge the box")]
    MeanPlacement {
        placed: usize,
        requested: usize,
        min_dist: f64,
    },
}

/// Immutable labeled feature matrix with its class inventory and optional
/// bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    label_names: Vec<String>,
    bounds: Option<(f64, f64)>,
    provenance: String,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        label_names: Vec<String>,
        bounds: Option<(f64, f64)>,
        provenance: String,
    ) -> Result<Self, DataError> {
        if features.len() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if num_classes < 1 {
            return Err(DataError::Invalid("num_classes must be positive".into()));
        }
        if label_names.len() != num_classes {
            return Err(DataError::Invalid(format!(
                "{} label names for {num_classes} classes",
                label_names.len()
            )));
        }
        if let Some((lo, hi)) = bounds {
            if !(lo < hi) {
                return Err(DataError::Invalid(format!("box [{lo},{hi}] is empty")));
            }
        }
        for (row, x) in features.iter().enumerate() {
            if x.len() != dim {
                return Err(DataError::RowLength {
                    row,
                    got: x.len(),
                    expected: dim,
                });
            }
            for (col, &v) in x.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFinite { line: row });
                }
                if let Some((lo, hi)) = bounds {
                    if v < lo || v > hi {
                        return Err(DataError::OutsideBox { row, col });
                    }
                }
            }
        }
        for &y in &labels {
            if y >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    label: y,
                    num_classes,
                });
            }
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
            label_names,
            bounds,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let mut features = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Invalid(format!(
                    "subset index {i} out of range for {} rows",
                    self.len()
                )));
            }
            features.push(self.features[i].clone());
            labels.push(self.labels[i]);
        }
        Ok(Self {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
            bounds: self.bounds,
            provenance: self.provenance.clone(),
        })
    }

    /// Same rows with replaced feature values (perturbed copies, rescales).
    pub fn with_features(&self, features: Vec<Vec<f64>>) -> Result<Self, DataError> {
        Self::new(
            features,
            self.labels.clone(),
            self.dim,
            self.num_classes,
            self.label_names.clone(),
            self.bounds,
            self.provenance.clone(),
        )
    }

    /// CSV bytes: feature columns `x0..x{d-1}`, then the label column.
    /// Floats use the shortest exact representation, so a rewrite of an
    /// imported file is byte-identical.
    pub fn csv_bytes(&self) -> Result<Vec<u8>, DataError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("label".to_string());
        writer.write_record(&header)?;
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let mut record: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            record.push(self.label_names[y].clone());
            writer.write_record(&record)?;
        }
        writer
            .into_inner()
            .map_err(|e| DataError::Invalid(format!("csv buffer: {e}")))
    }

    /// Write [`Dataset::csv_bytes`] to a file.
    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.csv_bytes()?)?;
        Ok(())
    }
}

/// How to interpret a CSV file: which column holds labels, and whether to
/// min-max rescale features into a target box.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub label_column: String,
    pub normalize: Option<(f64, f64)>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".to_string(),
            normalize: None,
        }
    }
}

/// Load a headered CSV. Every non-label column is a feature, in header
/// order; labels map to 0..K−1 by first appearance.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| DataError::UnknownColumn(schema.label_column.clone()))?;
    let feature_idx: Vec<usize> = (0..headers.len()).filter(|&i| i != label_idx).collect();

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(DataError::RowLength {
                row,
                got: record.len(),
                expected: headers.len(),
            });
        }
        let mut x = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            let field = &record[i];
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                line,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { line });
            }
            x.push(v);
        }
        features.push(x);
        raw_labels.push(record[label_idx].to_string());
    }
    if features.is_empty() {
        return Err(DataError::Empty);
    }

    let mut label_names: Vec<String> = Vec::new();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|name| {
            label_names
                .iter()
                .position(|n| n == name)
                .unwrap_or_else(|| {
                    label_names.push(name.clone());
                    label_names.len() - 1
                })
        })
        .collect();

    let dim = feature_idx.len();
    let mut bounds = None;
    let mut provenance = format!("csv:{}", path.display());
    if let Some((lo, hi)) = schema.normalize {
        if !(lo < hi) {
            return Err(DataError::Invalid(format!(
                "normalization box [{lo},{hi}] is empty"
            )));
        }
        for j in 0..dim {
            let (mut cmin, mut cmax) = (f64::INFINITY, f64::NEG_INFINITY);
            for x in &features {
                cmin = cmin.min(x[j]);
                cmax = cmax.max(x[j]);
            }
            for x in &mut features {
                // Constant columns map to the middle of the target range.
                x[j] = if cmax > cmin {
                    lo + (x[j] - cmin) / (cmax - cmin) * (hi - lo)
                } else {
                    0.5 * (lo + hi)
                };
                x[j] = x[j].clamp(lo, hi);
            }
        }
        bounds = Some((lo, hi));
        provenance.push_str(&format!(" normalized to [{lo},{hi}]"));
    }

    let num_classes = label_names.len();
    Dataset::new(
        features,
        labels,
        dim,
        num_classes,
        label_names,
        bounds,
        provenance,
    )
}

/// Gaussian class blobs with separated means, clipped to the box.
///
/// Means are drawn uniformly inside the box, rejecting candidates closer
/// than `2·spread` to an accepted mean; each class then contributes exactly
/// `n_per_class` rows in class order.
pub fn gen_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    bounds: (f64, f64),
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::Invalid("need at least 2 classes".into()));
    }
    if dim < 1 {
        return Err(DataError::Invalid("need at least 1 feature".into()));
    }
    if n_per_class == 0 {
        return Err(DataError::Empty);
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(DataError::Invalid(format!(
            "spread must be positive, got {spread}"
        )));
    }
    let (lo, hi) = bounds;
    if !(lo < hi) {
        return Err(DataError::Invalid(format!("box [{lo},{hi}] is empty")));
    }

    let mut rng = stream_rng(seed, "data", 0);
    let min_dist = 2.0 * spread;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    const RETRIES_PER_MEAN: usize = 1000;
    for _ in 0..num_classes {
        let mut placed = false;
        for _ in 0..RETRIES_PER_MEAN {
            let candidate: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..hi)).collect();
            let far_enough = means.iter().all(|m| {
                let d2: f64 = m
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= min_dist
            });
            if far_enough {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::MeanPlacement {
                placed: means.len(),
                requested: num_classes,
                min_dist,
            });
        }
    }

    let mut features = Vec::with_capacity(num_classes * n_per_class);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + spread * z).clamp(lo, hi)
                })
                .collect();
            features.push(x);
            labels.push(c);
        }
    }

    let label_names = (0..num_classes).map(|c| c.to_string()).collect();
    Dataset::new(
        features,
        labels,
        dim,
        num_classes,
        label_names,
        Some(bounds),
        format!("blobs seed={seed} k={num_classes} d={dim} spread={spread}"),
    )
}

/// Fractions for the train/calibration/test cut, plus the permutation seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub cal: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, cal: f64, test: f64, seed: u64) -> Result<Self, DataError> {
        let spec = Self {
            train,
            cal,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for f in [self.train, self.cal, self.test] {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(DataError::InvalidFractions(format!(
                    "fraction {f} is negative or non-finite"
                )));
            }
        }
        let sum = self.train + self.cal + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidFractions(format!(
                "fractions sum to {sum}"
            )));
        }
        Ok(())
    }
}

/// The three parts plus the permuted source indices behind them.
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub cal_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Partition by one seeded uniform permutation cut at the fraction
/// boundaries. Calibration and test are exchangeable by construction.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<SplitResult, DataError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(DataError::Empty);
    }
    let n = data.len();
    // Round at cumulative boundaries so the parts always sum to n.
    let b1 = ((spec.train * n as f64).round() as usize).min(n);
    let b2 = (((spec.train + spec.cal) * n as f64).round() as usize).clamp(b1, n);
    let (n_train, n_cal) = (b1, b2 - b1);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, "split", 0));

    let train_indices = order[..n_train].to_vec();
    let cal_indices = order[n_train..n_train + n_cal].to_vec();
    let test_indices = order[n_train + n_cal..].to_vec();
    Ok(SplitResult {
        train: data.subset(&train_indices)?,
        cal: data.subset(&cal_indices)?,
        test: data.subset(&test_indices)?,
        train_indices,
        cal_indices,
        test_indices,
    })
}
