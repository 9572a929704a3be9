//! Split conformal prediction with a logit-threshold score, its sigmoid
//! relaxation, and set-quality metrics.
//!
//! Calibration takes the true-class logits of a held-out set and returns the
//! threshold τ equal to their ⌈(1+n)(1−α)⌉-th largest value; prediction sets
//! then collect every class whose logit reaches τ. When the required rank
//! exceeds n the threshold degenerates to −∞ and the set is all classes,
//! which keeps the coverage guarantee at the cost of informativeness.
//!
//! The soft set size M_T(x) = Σ_k σ((f_k(x)−τ)/T) relaxes the hard set
//! cardinality into a quantity differentiable in both logits and threshold;
//! as T ↓ 0 it recovers |Γ| whenever no logit sits exactly at τ. Attack and
//! training objectives are built from it, so every quantity here exists both
//! as a plain evaluation and as a tape-recorded node.

use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, NodeId, Tape};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("lambda must be nonnegative and finite, got {0}")]
    InvalidLambda(f64),
    #[error("class {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("calibration score list is empty")]
    EmptyCalibration,
    #[error("metric input is empty")]
    EmptyInput,
    #[error("got {sets} sets but {labels} labels")]
    LengthMismatch { sets: usize, labels: usize },
    #[error("score at position {0} is not finite")]
    NonFiniteScore(usize),
    #[error("size strata invalid: {0}")]
    InvalidStrata(String),
    #[error("set size {size} falls outside every stratum")]
    UncoveredSize { size: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Calibrated threshold together with the order-statistic rank behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    /// Threshold value; `NEG_INFINITY` when the rank exceeds the sample count.
    pub tau: f64,
    /// Required rank k = ⌈(1+n)(1−α)⌉.
    pub rank: usize,
    /// Number of calibration scores.
    pub n: usize,
}

impl CalibrationResult {
    /// True when calibration degenerated to predict-everything.
    pub fn is_sentinel(&self) -> bool {
        self.tau == f64::NEG_INFINITY
    }
}

/// Sorted, duplicate-free set of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    members: Vec<usize>,
}

impl PredictionSet {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self { members }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.binary_search(&class).is_ok()
    }
}

/// Weighting of the set-size penalty against the classification term, plus
/// the training temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub t2: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, t2: f64) -> Result<Self, ConformalError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ConformalError::InvalidLambda(lambda));
        }
        check_temperature(t2)?;
        Ok(Self { lambda, t2 })
    }
}

fn check_temperature(t: f64) -> Result<(), ConformalError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ConformalError::InvalidTemperature(t))
    }
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidAlpha(alpha))
    }
}

fn check_label(label: usize, num_classes: usize) -> Result<(), ConformalError> {
    if label < num_classes {
        Ok(())
    } else {
        Err(ConformalError::LabelOutOfRange { label, num_classes })
    }
}

/// Conformity score of a labeled sample: the true-class logit.
pub fn conformity_score(logits: &[f64], label: usize) -> Result<f64, ConformalError> {
    check_label(label, logits.len())?;
    Ok(logits[label])
}

/// Calibrate the threshold as the k-th largest score, k = ⌈(1+n)(1−α)⌉.
///
/// Duplicates count separately; if k exceeds n the threshold is −∞ and
/// every later prediction set is the full label space.
pub fn thr_quantile(scores: &[f64], alpha: f64) -> Result<CalibrationResult, ConformalError> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
        return Err(ConformalError::NonFiniteScore(pos));
    }
    let n = scores.len();
    let rank = (((1 + n) as f64) * (1.0 - alpha)).ceil() as usize;
    if rank > n {
        return Ok(CalibrationResult {
            tau: f64::NEG_INFINITY,
            rank,
            n,
        });
    }
    let mut sorted = scores.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(rank - 1, |a, b| b.total_cmp(a));
    Ok(CalibrationResult { tau: *kth, rank, n })
}

/// Calibrate from per-row logits and labels in one pass.
pub fn calibrate_from_logits(
    logits: &[Vec<f64>],
    labels: &[usize],
    alpha: f64,
) -> Result<CalibrationResult, ConformalError> {
    if logits.len() != labels.len() {
        return Err(ConformalError::LengthMismatch {
            sets: logits.len(),
            labels: labels.len(),
        });
    }
    let scores = logits
        .iter()
        .zip(labels)
        .map(|(f, &y)| conformity_score(f, y))
        .collect::<Result<Vec<f64>, _>>()?;
    thr_quantile(&scores, alpha)
}

/// Prediction sets for many rows at one threshold.
pub fn sets_from_logits(logits: &[Vec<f64>], tau: f64) -> Vec<PredictionSet> {
    logits.iter().map(|f| prediction_set(f, tau)).collect()
}

/// Classes whose logit is at least τ (inclusive).
pub fn prediction_set(logits: &[f64], tau: f64) -> PredictionSet {
    PredictionSet::new(
        logits
            .iter()
            .enumerate()
            .filter(|(_, &f)| f >= tau)
            .map(|(k, _)| k)
            .collect(),
    )
}

/// Σ_k σ((f_k − τ)/T): the temperature-T relaxation of the set size.
pub fn soft_set_size(logits: &[f64], tau: f64, temp: f64) -> Result<f64, ConformalError> {
    check_temperature(temp)?;
    let inv = 1.0 / temp;
    Ok(logits.iter().map(|&f| sigmoid((f - tau) * inv)).sum())
}

/// σ((f_y−τ)/T) − Σ_{k≠y} σ((f_k−τ)/T): rewards true-class inclusion and
/// punishes every other inclusion.
pub fn classification_loss(
    logits: &[f64],
    label: usize,
    tau: f64,
    t2: f64,
) -> Result<f64, ConformalError> {
    check_label(label, logits.len())?;
    check_temperature(t2)?;
    let inv = 1.0 / t2;
    let sigmas: Vec<f64> = logits.iter().map(|&f| sigmoid((f - tau) * inv)).collect();
    let total: f64 = sigmas.iter().sum();
    Ok(2.0 * sigmas[label] - total)
}

/// The minimization objective −classification_loss + λ·soft_set_size, both
/// terms at temperature T₂.
pub fn total_training_loss(
    logits: &[f64],
    label: usize,
    tau: f64,
    weights: &LossWeights,
) -> Result<f64, ConformalError> {
    check_label(label, logits.len())?;
    let inv = 1.0 / weights.t2;
    let sigmas: Vec<f64> = logits.iter().map(|&f| sigmoid((f - tau) * inv)).collect();
    let total: f64 = sigmas.iter().sum();
    let class = 2.0 * sigmas[label] - total;
    Ok(-class + weights.lambda * total)
}

/// Fraction of samples whose label the set contains.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64, ConformalError> {
    if sets.is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    if sets.len() != labels.len() {
        return Err(ConformalError::LengthMismatch {
            sets: sets.len(),
            labels: labels.len(),
        });
    }
    let hits = sets
        .iter()
        .zip(labels)
        .filter(|(set, &y)| set.contains(y))
        .count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Mean set cardinality.
pub fn avg_size(sets: &[PredictionSet]) -> Result<f64, ConformalError> {
    if sets.is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    let total: usize = sets.iter().map(PredictionSet::size).sum();
    Ok(total as f64 / sets.len() as f64)
}

/// Disjoint integer intervals partitioning the possible set sizes 0..=K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeStrata {
    intervals: Vec<(usize, usize)>,
}

impl SizeStrata {
    /// Built-in binning {0–1}, {2–3}, {4–6}, {7–10}, {11–K}, clipped to the
    /// class count.
    pub fn default_for(num_classes: usize) -> Self {
        let template = [(0, 1), (2, 3), (4, 6), (7, 10), (11, usize::MAX)];
        let intervals = template
            .iter()
            .filter(|(lo, _)| *lo <= num_classes)
            .map(|&(lo, hi)| (lo, hi.min(num_classes)))
            .collect();
        Self { intervals }
    }

    /// Validate a custom binning: ordered, disjoint, covering 0..=K.
    pub fn custom(
        intervals: Vec<(usize, usize)>,
        num_classes: usize,
    ) -> Result<Self, ConformalError> {
        if intervals.is_empty() {
            return Err(ConformalError::InvalidStrata("no intervals".into()));
        }
        let mut expected_lo = 0;
        for &(lo, hi) in &intervals {
            if lo != expected_lo {
                return Err(ConformalError::InvalidStrata(format!(
                    "interval [{lo},{hi}] leaves a gap or overlap at size {expected_lo}"
                )));
            }
            if hi < lo {
                return Err(ConformalError::InvalidStrata(format!(
                    "interval [{lo},{hi}] is inverted"
                )));
            }
            expected_lo = hi + 1;
        }
        if expected_lo != num_classes + 1 {
            return Err(ConformalError::InvalidStrata(format!(
                "intervals cover 0..={}, need 0..={num_classes}",
                expected_lo - 1
            )));
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    /// Index of the stratum holding a given set size.
    pub fn stratum_of(&self, size: usize) -> Option<usize> {
        self.intervals
            .iter()
            .position(|&(lo, hi)| lo <= size && size <= hi)
    }
}

/// Size-stratified coverage violation: the worst |within-stratum coverage −
/// (1−α)| over strata that received at least one sample.
pub fn sscv(
    sets: &[PredictionSet],
    labels: &[usize],
    alpha: f64,
    strata: &SizeStrata,
) -> Result<f64, ConformalError> {
    check_alpha(alpha)?;
    if sets.is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    if sets.len() != labels.len() {
        return Err(ConformalError::LengthMismatch {
            sets: sets.len(),
            labels: labels.len(),
        });
    }
    let mut counts = vec![0usize; strata.intervals.len()];
    let mut hits = vec![0usize; strata.intervals.len()];
    for (set, &y) in sets.iter().zip(labels) {
        let j = strata
            .stratum_of(set.size())
            .ok_or(ConformalError::UncoveredSize { size: set.size() })?;
        counts[j] += 1;
        if set.contains(y) {
            hits[j] += 1;
        }
    }
    let target = 1.0 - alpha;
    let worst = counts
        .iter()
        .zip(&hits)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &h)| (h as f64 / c as f64 - target).abs())
        .fold(0.0, f64::max);
    Ok(worst)
}

/// Record Σ_k σ((f_k − τ)/T) with τ itself a tape node, so gradients flow
/// through both the logits and the threshold.
pub fn soft_set_size_node(
    tape: &mut Tape,
    logits: NodeId,
    tau: NodeId,
    temp: f64,
) -> Result<NodeId, ConformalError> {
    check_temperature(temp)?;
    let shifted = tape.sub_scalar(logits, tau)?;
    let scaled = tape.scale(shifted, 1.0 / temp)?;
    let sig = tape.sigmoid(scaled)?;
    Ok(tape.sum(sig)?)
}

/// Record the classification loss 2σ_y − Σσ at temperature T₂.
pub fn classification_loss_node(
    tape: &mut Tape,
    logits: NodeId,
    label: usize,
    tau: NodeId,
    t2: f64,
) -> Result<NodeId, ConformalError> {
    check_label(label, tape.value(logits).len())?;
    check_temperature(t2)?;
    let shifted = tape.sub_scalar(logits, tau)?;
    let scaled = tape.scale(shifted, 1.0 / t2)?;
    let sig = tape.sigmoid(scaled)?;
    let total = tape.sum(sig)?;
    let true_term = tape.index(sig, label)?;
    let doubled = tape.scale(true_term, 2.0)?;
    Ok(tape.sub(doubled, total)?)
}

/// Record the minimization objective −L_class + λ·M, sharing one sigmoid
/// vector between both terms.
pub fn total_training_loss_node(
    tape: &mut Tape,
    logits: NodeId,
    label: usize,
    tau: NodeId,
    weights: &LossWeights,
) -> Result<NodeId, ConformalError> {
    check_label(label, tape.value(logits).len())?;
    let shifted = tape.sub_scalar(logits, tau)?;
    let scaled = tape.scale(shifted, 1.0 / weights.t2)?;
    let sig = tape.sigmoid(scaled)?;
    let total = tape.sum(sig)?;
    let true_term = tape.index(sig, label)?;
    let doubled = tape.scale(true_term, 2.0)?;
    let class = tape.sub(doubled, total)?;
    let neg_class = tape.neg(class)?;
    let size_term = tape.scale(total, weights.lambda)?;
    Ok(tape.add(neg_class, size_term)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_gradient, Tensor};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const FIXTURE_LOGITS: [f64; 4] = [2.5, 5.5, 3.25, 0.5];

    #[test]
    fn conformity_score_picks_label_logit() {
        let logits = [3.0, 5.0, 3.0, 0.6];
        assert_eq!(conformity_score(&logits, 1).unwrap(), 5.0);
        assert_eq!(conformity_score(&logits, 3).unwrap(), 0.6);
        assert!(matches!(
            conformity_score(&logits, 4),
            Err(ConformalError::LabelOutOfRange {
                label: 4,
                num_classes: 4
            })
        ));
    }

    #[test]
    fn quantile_examples() {
        let r = thr_quantile(&[0.9, 0.8, 0.7, 0.6], 0.25).unwrap();
        assert_eq!((r.rank, r.tau), (4, 0.6));

        let nine: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let r = thr_quantile(&nine, 0.1).unwrap();
        assert_eq!(r.rank, 9);
        assert_abs_diff_eq!(r.tau, 0.1, epsilon = 1e-12);

        let r = thr_quantile(&[0.5], 0.1).unwrap();
        assert_eq!(r.rank, 2);
        assert!(r.is_sentinel());
    }

    #[test]
    fn quantile_rejects_bad_input() {
        assert!(matches!(
            thr_quantile(&[], 0.1),
            Err(ConformalError::EmptyCalibration)
        ));
        assert!(thr_quantile(&[1.0], 0.0).is_err());
        assert!(thr_quantile(&[1.0], 1.0).is_err());
        assert!(matches!(
            thr_quantile(&[0.1, f64::NAN], 0.1),
            Err(ConformalError::NonFiniteScore(1))
        ));
    }

    #[test]
    fn prediction_set_examples() {
        let logits = [3.0, 5.0, 3.0, 0.6];
        assert_eq!(prediction_set(&logits, 3.0).members(), &[0, 1, 2]);
        assert!(prediction_set(&logits, 6.0).is_empty());
        assert_eq!(
            prediction_set(&logits, f64::NEG_INFINITY).members(),
            &[0, 1, 2, 3]
        );
    }

    #[test]
    fn prediction_set_boundary_is_inclusive() {
        let logits = [1.0, 2.0];
        assert_eq!(prediction_set(&logits, 1.0).members(), &[0, 1]);
        let above = f64::from_bits(1.0f64.to_bits() + 1);
        assert_eq!(prediction_set(&logits, above).members(), &[1]);
    }

    #[test]
    fn soft_size_fixture() {
        let m = soft_set_size(&FIXTURE_LOGITS, 2.5, 1.0).unwrap();
        assert_abs_diff_eq!(m, 2.2509, epsilon = 1e-3);
    }

    #[test]
    fn soft_size_cold_temperature_is_hard_size() {
        let logits = [3.0, 5.0, 3.0, 0.6];
        let m = soft_set_size(&logits, 4.0, 1e-6).unwrap();
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn soft_size_at_threshold_is_half_count() {
        let logits = [2.0; 5];
        assert_eq!(soft_set_size(&logits, 2.0, 0.37).unwrap(), 2.5);
    }

    #[test]
    fn soft_size_with_sentinel_tau_is_class_count() {
        let logits = [3.0, 5.0, 3.0, 0.6];
        assert_eq!(soft_set_size(&logits, f64::NEG_INFINITY, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn soft_size_rejects_bad_temperature() {
        assert!(soft_set_size(&[1.0], 0.0, 0.0).is_err());
        assert!(soft_set_size(&[1.0], 0.0, -1.0).is_err());
    }

    #[test]
    fn classification_loss_fixture() {
        let l = classification_loss(&FIXTURE_LOGITS, 0, 2.5, 1.0).unwrap();
        assert_abs_diff_eq!(l, -1.2509, epsilon = 1e-3);
    }

    #[test]
    fn classification_loss_saturation() {
        // True class far above the threshold, the rest far below.
        let l = classification_loss(&[50.0, -50.0, -50.0], 0, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-9);
        // Threshold far above everything.
        let l = classification_loss(&[1.0, 2.0, 3.0], 0, 100.0, 1.0).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn total_loss_fixture() {
        let w0 = LossWeights::new(0.0, 1.0).unwrap();
        let t0 = total_training_loss(&FIXTURE_LOGITS, 0, 2.5, &w0).unwrap();
        assert_abs_diff_eq!(t0, 1.2509, epsilon = 1e-3);

        let w1 = LossWeights::new(1.0, 1.0).unwrap();
        let t1 = total_training_loss(&FIXTURE_LOGITS, 0, 2.5, &w1).unwrap();
        assert_abs_diff_eq!(t1, 3.5018, epsilon = 1e-3);
    }

    #[test]
    fn total_loss_with_sentinel_tau_saturates() {
        // All sigmoids hit 1, so the loss is (K−2) + λK exactly.
        let w = LossWeights::new(0.0, 1.0).unwrap();
        let t = total_training_loss(&[1.0, 2.0, 3.0, 4.0], 0, f64::NEG_INFINITY, &w).unwrap();
        assert_eq!(t, 2.0);
    }

    #[test]
    fn lambda_one_doubles_false_class_terms() {
        let w = LossWeights::new(1.0, 1.0).unwrap();
        let total = total_training_loss(&FIXTURE_LOGITS, 0, 2.5, &w).unwrap();
        let false_sum: f64 = [1, 2, 3]
            .iter()
            .map(|&k| sigmoid(FIXTURE_LOGITS[k] - 2.5))
            .sum();
        assert_abs_diff_eq!(total, 2.0 * false_sum, epsilon = 1e-12);
    }

    #[test]
    fn coverage_and_size_hand_counts() {
        let sets = vec![
            PredictionSet::new(vec![0]),
            PredictionSet::new(vec![0, 1]),
            PredictionSet::new(vec![2, 0, 1]),
            PredictionSet::new(vec![]),
        ];
        let labels = [0, 1, 1, 0];
        assert_eq!(coverage(&sets, &labels).unwrap(), 0.75);
        assert_eq!(avg_size(&sets).unwrap(), 1.5);
    }

    #[test]
    fn metrics_reject_empty_or_mismatched() {
        assert!(matches!(
            coverage(&[], &[]),
            Err(ConformalError::EmptyInput)
        ));
        assert!(matches!(avg_size(&[]), Err(ConformalError::EmptyInput)));
        let sets = vec![PredictionSet::new(vec![0])];
        assert!(matches!(
            coverage(&sets, &[0, 1]),
            Err(ConformalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn default_strata_clip_to_class_count() {
        let s = SizeStrata::default_for(4);
        assert_eq!(s.intervals(), &[(0, 1), (2, 3), (4, 4)]);
        let s = SizeStrata::default_for(16);
        assert_eq!(s.intervals(), &[(0, 1), (2, 3), (4, 6), (7, 10), (11, 16)]);
        let s = SizeStrata::default_for(2);
        assert_eq!(s.intervals(), &[(0, 1), (2, 2)]);
    }

    #[test]
    fn custom_strata_validation() {
        assert!(SizeStrata::custom(vec![(0, 2), (3, 4)], 4).is_ok());
        assert!(SizeStrata::custom(vec![(0, 2), (2, 4)], 4).is_err());
        assert!(SizeStrata::custom(vec![(0, 2), (4, 4)], 4).is_err());
        assert!(SizeStrata::custom(vec![(0, 2)], 4).is_err());
        assert!(SizeStrata::custom(vec![], 4).is_err());
    }

    #[test]
    fn sscv_two_strata_example() {
        // Stratum {0-1}: 8 of 10 covered. Stratum {2-3}: 10 of 10 covered.
        let mut sets = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            sets.push(PredictionSet::new(vec![0]));
            labels.push(if i < 8 { 0 } else { 1 });
        }
        for _ in 0..10 {
            sets.push(PredictionSet::new(vec![0, 1]));
            labels.push(1);
        }
        let strata = SizeStrata::default_for(4);
        let v = sscv(&sets, &labels, 0.1, &strata).unwrap();
        assert_abs_diff_eq!(v, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn sscv_single_stratum_reduces_to_coverage_gap() {
        let sets = vec![
            PredictionSet::new(vec![0]),
            PredictionSet::new(vec![1]),
            PredictionSet::new(vec![0]),
            PredictionSet::new(vec![0]),
        ];
        let labels = [0, 0, 0, 0];
        let strata = SizeStrata::custom(vec![(0, 4)], 4).unwrap();
        let v = sscv(&sets, &labels, 0.1, &strata).unwrap();
        let cov = coverage(&sets, &labels).unwrap();
        assert_abs_diff_eq!(v, (cov - 0.9).abs(), epsilon = 1e-12);
    }

    #[test]
    fn sscv_exact_target_coverage_is_zero() {
        // Both strata covered at exactly 1−α = 0.8.
        let mut sets = Vec::new();
        let mut labels = Vec::new();
        for i in 0..5 {
            sets.push(PredictionSet::new(vec![0]));
            labels.push(if i < 4 { 0 } else { 1 });
        }
        for i in 0..5 {
            sets.push(PredictionSet::new(vec![0, 1]));
            labels.push(if i < 4 { 1 } else { 2 });
        }
        let strata = SizeStrata::default_for(4);
        assert_eq!(sscv(&sets, &labels, 0.2, &strata).unwrap(), 0.0);
    }

    #[test]
    fn node_builders_match_scalar_paths_bitwise() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(FIXTURE_LOGITS.to_vec()).unwrap());
        let tau = tape.constant_scalar(2.5).unwrap();

        let m = soft_set_size_node(&mut tape, logits, tau, 0.7).unwrap();
        let l = classification_loss_node(&mut tape, logits, 0, tau, 0.7).unwrap();
        let w = LossWeights::new(0.5, 0.7).unwrap();
        let t = total_training_loss_node(&mut tape, logits, 0, tau, &w).unwrap();

        let ms = soft_set_size(&FIXTURE_LOGITS, 2.5, 0.7).unwrap();
        let ls = classification_loss(&FIXTURE_LOGITS, 0, 2.5, 0.7).unwrap();
        let ts = total_training_loss(&FIXTURE_LOGITS, 0, 2.5, &w).unwrap();

        assert_eq!(tape.value_scalar(m).unwrap().to_bits(), ms.to_bits());
        assert_eq!(tape.value_scalar(l).unwrap().to_bits(), ls.to_bits());
        assert_eq!(tape.value_scalar(t).unwrap().to_bits(), ts.to_bits());
    }

    #[test]
    fn soft_size_gradient_flows_through_threshold() {
        // With τ tied to logit 0, the derivative w.r.t. that logit combines
        // the direct term and the threshold term of every other class.
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(FIXTURE_LOGITS.to_vec()).unwrap());
        let tau = tape.index(logits, 0).unwrap();
        let m = soft_set_size_node(&mut tape, logits, tau, 1.0).unwrap();
        let grads = tape.backward(m, &[logits]).unwrap();

        let numeric = finite_difference_gradient(
            |p| {
                let tau = p[0];
                p.iter().map(|&f| sigmoid(f - tau)).sum()
            },
            &FIXTURE_LOGITS,
            1e-4,
        );
        for (a, n) in grads.grad(logits).unwrap().data().iter().zip(&numeric) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-6);
        }
    }

    fn tie_heavy_scores() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(
            prop_oneof![Just(0.1), Just(0.2), Just(0.3), (-1.0f64..1.0)],
            1..=12,
        )
    }

    proptest! {
        #[test]
        fn quantile_matches_sort_oracle(
            scores in tie_heavy_scores(),
            alpha in 0.01f64..0.99,
        ) {
            let r = thr_quantile(&scores, alpha).unwrap();
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let k = (((1 + scores.len()) as f64) * (1.0 - alpha)).ceil() as usize;
            prop_assert_eq!(r.rank, k);
            if k > scores.len() {
                prop_assert!(r.is_sentinel());
            } else {
                prop_assert_eq!(r.tau.to_bits(), sorted[k - 1].to_bits());
            }
        }

        #[test]
        fn sets_shrink_as_threshold_rises(
            logits in proptest::collection::vec(-5.0f64..5.0, 1..8),
            t1 in -6.0f64..6.0,
            gap in 0.0f64..3.0,
        ) {
            let low = prediction_set(&logits, t1);
            let high = prediction_set(&logits, t1 + gap);
            for k in high.members() {
                prop_assert!(low.contains(*k));
            }
        }

        #[test]
        fn pipeline_is_shift_invariant(
            raw in proptest::collection::vec(
                proptest::collection::vec(-2048i32..2048, 4),
                2..12
            ),
            labels_seed in proptest::collection::vec(0usize..4, 12),
            shift_ticks in -2048i32..2048,
            alpha in 0.05f64..0.5,
        ) {
            // Quantized logits and shift, so every sum below is exact and the
            // invariance holds bitwise, not just approximately.
            let quantum = (2.0f64).powi(-10);
            let logits: Vec<Vec<f64>> = raw
                .iter()
                .map(|row| row.iter().map(|&t| t as f64 * quantum).collect())
                .collect();
            let labels: Vec<usize> = labels_seed.iter().take(logits.len()).copied().collect();
            let c = shift_ticks as f64 * quantum;

            let scores: Vec<f64> = logits
                .iter()
                .zip(&labels)
                .map(|(l, &y)| conformity_score(l, y).unwrap())
                .collect();
            let base = thr_quantile(&scores, alpha).unwrap();

            let shifted_logits: Vec<Vec<f64>> = logits
                .iter()
                .map(|l| l.iter().map(|&f| f + c).collect())
                .collect();
            let shifted_scores: Vec<f64> = shifted_logits
                .iter()
                .zip(&labels)
                .map(|(l, &y)| conformity_score(l, y).unwrap())
                .collect();
            let moved = thr_quantile(&shifted_scores, alpha).unwrap();

            if base.is_sentinel() {
                prop_assert!(moved.is_sentinel());
            } else {
                prop_assert_eq!(moved.tau.to_bits(), (base.tau + c).to_bits());
            }
            for (l, s) in logits.iter().zip(&shifted_logits) {
                prop_assert_eq!(
                    prediction_set(l, base.tau),
                    prediction_set(s, moved.tau)
                );
            }
        }

        #[test]
        fn soft_size_stays_inside_bounds(
            logits in proptest::collection::vec(-10.0f64..10.0, 1..8),
            tau in -12.0f64..12.0,
            temp in 0.05f64..10.0,
        ) {
            let m = soft_set_size(&logits, tau, temp).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert!(m <= logits.len() as f64);
            // Strict interiority holds wherever the sigmoids cannot saturate
            // to exactly 0 or 1 in double precision.
            if logits.iter().all(|&f| ((f - tau) / temp).abs() < 30.0) {
                prop_assert!(m > 0.0);
                prop_assert!(m < logits.len() as f64);
            }
        }

        #[test]
        fn classification_loss_stays_inside_bounds(
            logits in proptest::collection::vec(-10.0f64..10.0, 2..8),
            label_pick in 0usize..8,
            tau in -12.0f64..12.0,
        ) {
            let label = label_pick % logits.len();
            let l = classification_loss(&logits, label, tau, 1.0).unwrap();
            prop_assert!(l > -((logits.len() - 1) as f64));
            prop_assert!(l < 1.0);
        }

        #[test]
        fn cold_temperature_recovers_hard_size(
            logits in proptest::collection::vec(-5.0f64..5.0, 1..8),
            tau in -6.0f64..6.0,
        ) {
            prop_assume!(logits.iter().all(|&f| (f - tau).abs() > 1e-3));
            let soft = soft_set_size(&logits, tau, 1e-6).unwrap();
            let hard = prediction_set(&logits, tau).size() as f64;
            prop_assert!((soft - hard).abs() < 1e-6);
        }

        #[test]
        fn training_loss_gradient_matches_finite_differences(
            logits in proptest::collection::vec(-4.0f64..4.0, 4),
            tau in -4.0f64..4.0,
            lambda in 0.0f64..2.0,
        ) {
            let weights = LossWeights::new(lambda, 0.8).unwrap();
            let mut tape = Tape::new();
            let ln = tape.leaf(Tensor::vector(logits.clone()).unwrap());
            let tn = tape.constant_scalar(tau).unwrap();
            let obj = total_training_loss_node(&mut tape, ln, 1, tn, &weights).unwrap();
            let grads = tape.backward(obj, &[ln]).unwrap();

            let numeric = finite_difference_gradient(
                |p| total_training_loss(p, 1, tau, &weights).unwrap(),
                &logits,
                1e-4,
            );
            for (a, n) in grads.grad(ln).unwrap().data().iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                prop_assert!((a - n).abs() / denom < 1e-5);
            }
        }
    }
}
