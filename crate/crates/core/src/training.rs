//! Training loops: standard cross-entropy, PGD adversarial training, and
//! conformal adversarial training.
//!
//! Conformal adversarial training splits every batch into a calibration
//! slice and a training slice. The calibration slice fixes the threshold τ
//! at the current parameters, the training slice is perturbed by the
//! set-size attack, and one optimizer step descends the summed training
//! loss −L_class + λ·M at that fixed τ. Attacking samples inside the batch
//! uses RNG streams derived per step and per sample, so reordering the
//! parallel attack never changes the result, and the shuffle streams stay
//! untouched by however many draws an attack makes.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attacks::{
    opsa_from_init, pgd, sample_uniform_ball, AdamState, AttackBudget, AttackError, OpsaConfig,
};
use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::conformal::{
    avg_size, calibrate_from_logits, conformity_score, coverage, sets_from_logits, thr_quantile,
    total_training_loss_node, ConformalError, LossWeights,
};
use crate::data::{DataError, Dataset};
use crate::models::{batch_logits, cross_entropy_node, Mlp, MlpConfig, ModelError};
use crate::seeds::{derive_seed, stream_rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config invalid: {0}")]
    InvalidConfig(String),
    #[error("dataset and config disagree: {0}")]
    DataMismatch(String),
    #[error("loss diverged to {0}")]
    Diverged(f64),
    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    Step {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Parameter optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { lr: 0.05 }
    }
}

impl OptimizerKind {
    fn validate(&self) -> Result<(), TrainError> {
        let lr = match self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr } => *lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(())
    }
}

/// Everything a training run needs besides the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: MlpConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Portion of each batch held out for calibration.
    pub cal_fraction: f64,
    pub alpha: f64,
    pub weights: LossWeights,
    pub budget: AttackBudget,
    /// Inner set-size attack settings.
    pub attack: OpsaConfig,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Perturb the calibration slice too before scoring it.
    pub attack_calibration: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch size must be at least 2 to leave room for a calibration slice, got {}",
                self.batch_size
            )));
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "calibration fraction must lie strictly between 0 and 1, got {}",
                self.cal_fraction
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "alpha must lie strictly between 0 and 1, got {}",
                self.alpha
            )));
        }
        LossWeights::new(self.weights.lambda, self.weights.t2)?;
        self.budget.validate()?;
        if !(self.pgd_step_size > 0.0 && self.pgd_step_size.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "pgd step size must be positive, got {}",
                self.pgd_step_size
            )));
        }
        if self.pgd_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "pgd step count must be at least 1".into(),
            ));
        }
        // Exercise the attack config through a throwaway run-less check.
        let attack = self.attack;
        if !(attack.t1 > 0.0 && attack.t1.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "attack temperature must be positive, got {}",
                attack.t1
            )));
        }
        if !(attack.eta > 0.0 && attack.eta.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "attack learning rate must be positive, got {}",
                attack.eta
            )));
        }
        if attack.steps == 0 {
            return Err(TrainError::InvalidConfig(
                "attack step count must be at least 1".into(),
            ));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<(), TrainError> {
        if data.dim() != self.model.input_dim {
            return Err(TrainError::DataMismatch(format!(
                "data has {} features, model expects {}",
                data.dim(),
                self.model.input_dim
            )));
        }
        if data.num_classes() != self.model.num_classes {
            return Err(TrainError::DataMismatch(format!(
                "data has {} classes, model expects {}",
                data.num_classes(),
                self.model.num_classes
            )));
        }
        if data.is_empty() {
            return Err(TrainError::DataMismatch("dataset is empty".into()));
        }
        Ok(())
    }

    /// How many calibration points a full batch contributes.
    fn cal_count(&self, chunk_len: usize) -> usize {
        let raw = (chunk_len as f64 * self.cal_fraction).round() as usize;
        raw.clamp(1, chunk_len - 1)
    }

    /// Warnings about the per-batch calibration slice; cheap statistics only.
    pub fn calibration_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let cal = self.cal_count(self.batch_size);
        let classes = self.model.num_classes;
        if cal < 5 * classes {
            warnings.push(format!(
                "calibration slice of ~{cal} points is small for {classes} classes; \
                 the per-batch threshold will be noisy"
            ));
        }
        let rank = (((1 + cal) as f64) * (1.0 - self.alpha)).ceil() as usize;
        if rank > cal {
            warnings.push(format!(
                "alpha = {} needs more than {cal} calibration points per batch; \
                 every batch will fall back to the predict-everything threshold",
                self.alpha
            ));
        }
        warnings
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss per optimized sample.
    pub mean_loss: f64,
    /// Mean calibrated threshold over non-degenerate batches.
    pub mean_tau: Option<f64>,
    /// Batches whose calibration degenerated to the predict-everything
    /// threshold; their update is skipped because the loss is constant.
    pub sentinel_batches: usize,
    pub monitor_coverage: Option<f64>,
    pub monitor_avg_size: Option<f64>,
}

/// Trained model plus the per-epoch log.
#[derive(Debug)]
pub struct TrainOutput {
    pub model: Mlp,
    pub epochs: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

enum ParamOptimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, states: Vec<AdamState> },
}

impl ParamOptimizer {
    fn new(kind: OptimizerKind, model: &Mlp) -> Self {
        match kind {
            OptimizerKind::Sgd { lr } => ParamOptimizer::Sgd { lr },
            OptimizerKind::Adam { lr } => {
                let states = model
                    .layers()
                    .iter()
                    .flat_map(|l| [l.weight.len(), l.bias.len()])
                    .map(|dim| AdamState::new(dim, Default::default()))
                    .collect();
                ParamOptimizer::Adam { lr, states }
            }
        }
    }

    /// Descend along `pre_scale * grads`.
    fn apply(
        &mut self,
        model: &mut Mlp,
        grads: &[Tensor],
        pre_scale: f64,
    ) -> Result<(), TrainError> {
        match self {
            ParamOptimizer::Sgd { lr } => {
                model.apply_param_step(grads, -*lr * pre_scale)?;
            }
            ParamOptimizer::Adam { lr, states } => {
                let mut updates = Vec::with_capacity(grads.len());
                for (state, grad) in states.iter_mut().zip(grads) {
                    let scaled: Vec<f64> = grad.data().iter().map(|&g| g * pre_scale).collect();
                    let update = state.step(&scaled, *lr);
                    updates.push(Tensor::new(grad.shape().to_vec(), update)?);
                }
                model.apply_param_step(&updates, -1.0)?;
            }
        }
        Ok(())
    }
}

fn zero_param_grads(model: &Mlp) -> Vec<Tensor> {
    model
        .layers()
        .iter()
        .flat_map(|l| {
            [
                Tensor::new(l.weight.shape().to_vec(), vec![0.0; l.weight.len()])
                    .expect("zero tensor"),
                Tensor::new(l.bias.shape().to_vec(), vec![0.0; l.bias.len()]).expect("zero tensor"),
            ]
        })
        .collect()
}

/// Batch rows as owned feature/label pairs.
type Rows = Vec<(Vec<f64>, usize)>;

/// One descent step on the mean cross-entropy of `rows`; returns the summed
/// loss. Shared by standard training and PGD training so that a zero attack
/// budget makes them coincide exactly.
fn ce_step(
    model: &mut Mlp,
    optimizer: &mut ParamOptimizer,
    rows: &[(Vec<f64>, usize)],
) -> Result<f64, TrainError> {
    let mut acc = zero_param_grads(model);
    let mut loss_sum = 0.0;
    for (x, y) in rows {
        let mut tape = Tape::new();
        let xn = tape.constant(Tensor::vector(x.clone())?);
        let taped = model.record(&mut tape, xn)?;
        let objective = cross_entropy_node(&mut tape, taped.logits, *y)?;
        let result = tape.backward(objective, &taped.param_nodes())?;
        loss_sum += result.value();
        for (slot, node) in acc.iter_mut().zip(taped.param_nodes()) {
            let grad = result.grad(node).expect("requested gradient");
            for (a, &g) in slot.data_mut().iter_mut().zip(grad.data()) {
                *a += g;
            }
        }
    }
    if !loss_sum.is_finite() {
        return Err(TrainError::Diverged(loss_sum));
    }
    optimizer.apply(model, &acc, 1.0 / rows.len() as f64)?;
    Ok(loss_sum)
}

/// One descent step on the summed training loss −L_class + λ·M at a fixed
/// threshold; returns the summed loss.
fn total_loss_step(
    model: &mut Mlp,
    optimizer: &mut ParamOptimizer,
    rows: &[(Vec<f64>, usize)],
    tau: f64,
    weights: &LossWeights,
) -> Result<f64, TrainError> {
    let mut acc = zero_param_grads(model);
    let mut loss_sum = 0.0;
    for (x, y) in rows {
        let mut tape = Tape::new();
        let xn = tape.constant(Tensor::vector(x.clone())?);
        let taped = model.record(&mut tape, xn)?;
        let tau_node = tape.constant_scalar(tau)?;
        let objective = total_training_loss_node(&mut tape, taped.logits, *y, tau_node, weights)?;
        let result = tape.backward(objective, &taped.param_nodes())?;
        loss_sum += result.value();
        for (slot, node) in acc.iter_mut().zip(taped.param_nodes()) {
            let grad = result.grad(node).expect("requested gradient");
            for (a, &g) in slot.data_mut().iter_mut().zip(grad.data()) {
                *a += g;
            }
        }
    }
    if !loss_sum.is_finite() {
        return Err(TrainError::Diverged(loss_sum));
    }
    optimizer.apply(model, &acc, 1.0)?;
    Ok(loss_sum)
}

fn perturbed_point(x: &[f64], eps: &[f64], budget: &AttackBudget) -> Vec<f64> {
    let mut point: Vec<f64> = x.iter().zip(eps).map(|(&a, &b)| a + b).collect();
    if let Some((lo, hi)) = budget.bounds {
        for v in point.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    point
}

/// Threshold calibration and prediction-set metrics on a held-out monitor
/// set: first half calibrates, second half is scored.
fn monitor_stats(
    model: &Mlp,
    monitor: &Dataset,
    alpha: f64,
) -> Result<Option<(f64, f64)>, TrainError> {
    let n = monitor.len();
    if n < 2 {
        return Ok(None);
    }
    let half = n / 2;
    let cal_idx: Vec<usize> = (0..half).collect();
    let test_idx: Vec<usize> = (half..n).collect();
    let cal = monitor.subset(&cal_idx)?;
    let test = monitor.subset(&test_idx)?;
    let cal_logits = batch_logits(model, cal.features())?;
    let calib = calibrate_from_logits(&cal_logits, cal.labels(), alpha)?;
    let test_logits = batch_logits(model, test.features())?;
    let sets = sets_from_logits(&test_logits, calib.tau);
    let cov = coverage(&sets, test.labels())?;
    let size = avg_size(&sets)?;
    Ok(Some((cov, size)))
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "shuffle", epoch as u64));
    order
}

fn wrap_step<T>(
    result: Result<T, TrainError>,
    epoch: usize,
    batch: usize,
) -> Result<T, TrainError> {
    result.map_err(|e| match e {
        already @ TrainError::Step { .. } => already,
        other => TrainError::Step {
            epoch,
            batch,
            message: other.to_string(),
        },
    })
}

/// Whether a cross-entropy trainer perturbs its batches first.
enum CePerturbation {
    None,
    Pgd,
}

fn train_cross_entropy(
    data: &Dataset,
    config: &TrainConfig,
    monitor: Option<&Dataset>,
    perturbation: CePerturbation,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    config.check_data(data)?;
    let mut model = Mlp::glorot(
        config.model.clone(),
        &mut stream_rng(config.seed, "init", 0),
    )?;
    let mut optimizer = ParamOptimizer::new(config.optimizer, &model);
    let n = data.len();
    let num_batches = n.div_ceil(config.batch_size);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = shuffled_indices(n, config.seed, epoch);
        let mut loss_mass = 0.0;
        let mut samples = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let step = epoch * num_batches + batch;
            let rows: Rows = match perturbation {
                CePerturbation::None => chunk
                    .iter()
                    .map(|&i| {
                        let (x, y) = data.row(i);
                        (x.to_vec(), y)
                    })
                    .collect(),
                CePerturbation::Pgd => {
                    let attack_root = derive_seed(config.seed, "train-attack", step as u64);
                    let outcomes: Result<Vec<_>, TrainError> = chunk
                        .iter()
                        .enumerate()
                        .map(|(j, &i)| {
                            let (x, y) = data.row(i);
                            let mut rng = stream_rng(attack_root, "attack", j as u64);
                            let out = pgd(
                                &model,
                                x,
                                y,
                                &config.budget,
                                config.pgd_steps,
                                config.pgd_step_size,
                                &mut rng,
                            )?;
                            Ok((perturbed_point(x, &out.epsilon_star, &config.budget), y))
                        })
                        .collect();
                    wrap_step(outcomes, epoch, batch)?
                }
            };
            let loss = wrap_step(ce_step(&mut model, &mut optimizer, &rows), epoch, batch)?;
            loss_mass += loss;
            samples += rows.len();
        }
        let monitor_pair = match monitor {
            Some(m) => monitor_stats(&model, m, config.alpha)?,
            None => None,
        };
        epochs.push(EpochStats {
            epoch,
            mean_loss: loss_mass / samples as f64,
            mean_tau: None,
            sentinel_batches: 0,
            monitor_coverage: monitor_pair.map(|p| p.0),
            monitor_avg_size: monitor_pair.map(|p| p.1),
        });
    }
    Ok(TrainOutput {
        model,
        epochs,
        warnings: Vec::new(),
    })
}

/// Plain mini-batch cross-entropy training from a seeded fresh model.
pub fn train_standard(
    data: &Dataset,
    config: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<TrainOutput, TrainError> {
    train_cross_entropy(data, config, monitor, CePerturbation::None)
}

/// PGD adversarial training: every batch is perturbed by the cross-entropy
/// PGD attack before the descent step. With a zero budget this reduces to
/// [`train_standard`] exactly.
pub fn train_pgd_at(
    data: &Dataset,
    config: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<TrainOutput, TrainError> {
    train_cross_entropy(data, config, monitor, CePerturbation::Pgd)
}

/// Split a shuffled chunk into calibration and training slices.
fn split_batch<'a>(
    chunk: &[usize],
    cal_count: usize,
    rng: &mut ChaCha8Rng,
    scratch: &'a mut Vec<usize>,
) -> (&'a [usize], &'a [usize]) {
    scratch.clear();
    scratch.extend_from_slice(chunk);
    scratch.shuffle(rng);
    scratch.split_at(cal_count)
}

/// Conformal adversarial training from an explicit starting model.
///
/// Each batch calibrates a threshold on its own held-out slice, attacks the
/// remaining samples with the set-size attack, and takes one optimizer step
/// on the summed training loss. Batches too small to split and batches
/// whose calibration degenerates are skipped (the degenerate loss is
/// constant in the parameters) but still counted in the statistics.
pub fn train_opsa_at(
    data: &Dataset,
    config: &TrainConfig,
    init: Mlp,
    monitor: Option<&Dataset>,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    config.check_data(data)?;
    if init.config() != &config.model {
        return Err(TrainError::DataMismatch(
            "initial model does not match the configured architecture".into(),
        ));
    }
    let mut model = init;
    let mut optimizer = ParamOptimizer::new(config.optimizer, &model);
    let n = data.len();
    let num_batches = n.div_ceil(config.batch_size);
    let classes = config.model.num_classes as f64;
    let sentinel_sample_loss = (classes - 2.0) + config.weights.lambda * classes;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut scratch = Vec::new();
    for epoch in 0..config.epochs {
        let order = shuffled_indices(n, config.seed, epoch);
        let mut loss_mass = 0.0;
        let mut samples = 0usize;
        let mut tau_sum = 0.0;
        let mut tau_count = 0usize;
        let mut sentinel_batches = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let step = epoch * num_batches + batch;
            let cal_count = config.cal_count(chunk.len());
            let mut split_rng = stream_rng(config.seed, "batch-split", step as u64);
            let (cal_pos, train_pos) = split_batch(chunk, cal_count, &mut split_rng, &mut scratch);
            let attack_root = derive_seed(config.seed, "train-attack", step as u64);

            let scores: Result<Vec<f64>, TrainError> = cal_pos
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let (x, y) = data.row(i);
                    let point = if config.attack_calibration {
                        let mut rng = stream_rng(attack_root, "attack", j as u64);
                        let init_eps = sample_uniform_ball(x.len(), &config.budget, &mut rng)?;
                        let out = opsa_from_init(
                            &model,
                            x,
                            y,
                            &config.budget,
                            &config.attack,
                            &init_eps,
                        )?;
                        perturbed_point(x, &out.epsilon_star, &config.budget)
                    } else {
                        x.to_vec()
                    };
                    let logits = model.forward_logits(&point)?;
                    Ok(conformity_score(&logits, y)?)
                })
                .collect();
            let scores = wrap_step(scores, epoch, batch)?;
            let calib = wrap_step(
                thr_quantile(&scores, config.alpha).map_err(TrainError::from),
                epoch,
                batch,
            )?;

            if calib.is_sentinel() {
                sentinel_batches += 1;
                loss_mass += sentinel_sample_loss * train_pos.len() as f64;
                samples += train_pos.len();
                continue;
            }
            tau_sum += calib.tau;
            tau_count += 1;

            let rows: Result<Rows, TrainError> = train_pos
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let (x, y) = data.row(i);
                    let mut rng = stream_rng(attack_root, "attack", (cal_count + j) as u64);
                    let init_eps = sample_uniform_ball(x.len(), &config.budget, &mut rng)?;
                    let out =
                        opsa_from_init(&model, x, y, &config.budget, &config.attack, &init_eps)?;
                    Ok((perturbed_point(x, &out.epsilon_star, &config.budget), y))
                })
                .collect();
            let rows = wrap_step(rows, epoch, batch)?;

            let loss = wrap_step(
                total_loss_step(
                    &mut model,
                    &mut optimizer,
                    &rows,
                    calib.tau,
                    &config.weights,
                ),
                epoch,
                batch,
            )?;
            loss_mass += loss;
            samples += rows.len();
        }
        let monitor_pair = match monitor {
            Some(m) => monitor_stats(&model, m, config.alpha)?,
            None => None,
        };
        epochs.push(EpochStats {
            epoch,
            mean_loss: if samples > 0 {
                loss_mass / samples as f64
            } else {
                f64::NAN
            },
            mean_tau: (tau_count > 0).then(|| tau_sum / tau_count as f64),
            sentinel_batches,
            monitor_coverage: monitor_pair.map(|p| p.0),
            monitor_avg_size: monitor_pair.map(|p| p.1),
        });
    }
    let warnings = config.calibration_warnings();
    Ok(TrainOutput {
        model,
        epochs,
        warnings,
    })
}
