//! Evaluation outputs shared by the evaluate and sweep commands: threshold
//! calibration over one dataset, set metrics over another, the JSON
//! summary, and the per-sample CSV the aggregates can be recomputed from.

use opsa_core::conformal::{
    avg_size, calibrate_from_logits, coverage, sets_from_logits, sscv, CalibrationResult,
    PredictionSet, SizeStrata,
};
use opsa_core::data::Dataset;
use opsa_core::models::{batch_logits, Mlp};
use serde::Serialize;

use crate::{runtime_err, CliError};

/// Calibration plus set metrics for one (calibration, test) pair.
pub struct EvalOutcome {
    pub calibration: CalibrationResult,
    pub sets: Vec<PredictionSet>,
    pub coverage: f64,
    pub avg_size: f64,
    pub sscv: f64,
    pub strata: Vec<(usize, usize)>,
}

/// Calibrate τ on `cal`, build prediction sets on `test`, compute metrics.
pub fn evaluate_pair(
    model: &Mlp,
    cal: &Dataset,
    test: &Dataset,
    alpha: f64,
) -> Result<EvalOutcome, CliError> {
    let cal_logits = batch_logits(model, cal.features()).map_err(runtime_err)?;
    let calibration =
        calibrate_from_logits(&cal_logits, cal.labels(), alpha).map_err(runtime_err)?;
    let test_logits = batch_logits(model, test.features()).map_err(runtime_err)?;
    let sets = sets_from_logits(&test_logits, calibration.tau);
    let cov = coverage(&sets, test.labels()).map_err(runtime_err)?;
    let size = avg_size(&sets).map_err(runtime_err)?;
    let strata = SizeStrata::default_for(model.num_classes());
    let violation = sscv(&sets, test.labels(), alpha, &strata).map_err(runtime_err)?;
    Ok(EvalOutcome {
        calibration,
        sets,
        coverage: cov,
        avg_size: size,
        sscv: violation,
        strata: strata.intervals().to_vec(),
    })
}

/// JSON summary for one evaluation. The threshold is `null` when
/// calibration degenerated to the predict-everything sentinel.
#[derive(Serialize)]
pub struct EvalSummary {
    pub format_version: u32,
    pub command: String,
    pub fingerprint: String,
    pub seed: u64,
    pub alpha: f64,
    pub n_cal: usize,
    pub n_test: usize,
    pub tau: Option<f64>,
    pub tau_is_sentinel: bool,
    pub calibration_rank: usize,
    pub coverage: f64,
    pub avg_size: f64,
    pub sscv: f64,
    pub strata: Vec<(usize, usize)>,
}

impl EvalSummary {
    pub fn new(
        command: &str,
        fingerprint: String,
        seed: u64,
        alpha: f64,
        n_cal: usize,
        outcome: &EvalOutcome,
    ) -> Self {
        let sentinel = outcome.calibration.is_sentinel();
        Self {
            format_version: 1,
            command: command.to_string(),
            fingerprint,
            seed,
            alpha,
            n_cal,
            n_test: outcome.sets.len(),
            tau: (!sentinel).then_some(outcome.calibration.tau),
            tau_is_sentinel: sentinel,
            calibration_rank: outcome.calibration.rank,
            coverage: outcome.coverage,
            avg_size: outcome.avg_size,
            sscv: outcome.sscv,
            strata: outcome.strata.clone(),
        }
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| runtime_err(format!("serialize report: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Per-sample CSV: one row per test sample with its label, set size,
/// coverage flag, and the set members joined by `|`. Coverage, average
/// size, and SSCV are all recomputable from these columns.
pub fn per_sample_csv(sets: &[PredictionSet], labels: &[usize]) -> Result<Vec<u8>, CliError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["id", "label", "set_size", "covered", "set_members"])
        .map_err(|e| runtime_err(format!("per-sample csv: {e}")))?;
    for (i, (set, &label)) in sets.iter().zip(labels).enumerate() {
        let members: Vec<String> = set.members().iter().map(usize::to_string).collect();
        writer
            .write_record([
                i.to_string(),
                label.to_string(),
                set.size().to_string(),
                u8::from(set.contains(label)).to_string(),
                members.join("|"),
            ])
            .map_err(|e| runtime_err(format!("per-sample csv: {e}")))?;
    }
    writer
        .into_inner()
        .map_err(|e| runtime_err(format!("per-sample csv: {e}")))
}
