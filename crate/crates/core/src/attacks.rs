//! Feasible-region projections and gradient attacks on classifiers.
//!
//! All attacks search inside B_r(0) ∩ (box − x): a perturbation ε must obey
//! the norm budget and keep x+ε inside the data box when one is declared.
//! FGSM and PGD ascend cross-entropy; the set-size attack ascends the soft
//! set size M_{T₁}(x+ε) with its threshold tied to the perturbed true-class
//! logit, so a successful perturbation drags other logits above the true
//! one and inflates the conformal prediction set downstream.
//!
//! Attacks on distinct samples are independent; the dataset driver runs
//! them in parallel with per-sample derived RNG streams, so results do not
//! depend on scheduling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::conformal::{soft_set_size_node, ConformalError};
use crate::data::{DataError, Dataset};
use crate::models::{cross_entropy, cross_entropy_node, Mlp, ModelError};
use crate::seeds::stream_rng;

/// Step-size test deciding that the inner loop has stopped moving.
pub const CONVERGENCE_TOL: f64 = 1e-6;

/// Fixed-point tolerance for the alternating clamp/rescale projection.
const L2_PROJECT_TOL: f64 = 1e-9;
const L2_PROJECT_MAX_ROUNDS: usize = 100;

/// Slack allowed by the feasibility certificate.
pub const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack budget invalid: {0}")]
    InvalidBudget(String),
    #[error("input coordinate {index} = {value} lies outside the box [{lo},{hi}]")]
    InputOutsideBox {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("perturbation norm {norm} exceeds budget {r}")]
    BudgetViolated { norm: f64, r: f64 },
    #[error("perturbed coordinate {index} = {value} escapes the box [{lo},{hi}]")]
    BoxViolated {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which norm bounds the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

/// Perturbation budget: radius, norm, and the optional coordinate box the
/// perturbed point must stay in.
///
/// A zero radius is allowed and makes every attack the identity, which is
/// what lets zero-budget adversarial training coincide with its clean
/// counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackBudget {
    pub r: f64,
    pub norm: Norm,
    pub bounds: Option<(f64, f64)>,
}

impl AttackBudget {
    /// L∞ budget with the default unit box.
    pub fn linf(r: f64) -> Self {
        Self {
            r,
            norm: Norm::Linf,
            bounds: Some((0.0, 1.0)),
        }
    }

    /// L2 budget with the default unit box.
    pub fn l2(r: f64) -> Self {
        Self {
            r,
            norm: Norm::L2,
            bounds: Some((0.0, 1.0)),
        }
    }

    /// Drop the box constraint entirely.
    pub fn without_box(mut self) -> Self {
        self.bounds = None;
        self
    }

    pub fn with_box(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(AttackError::InvalidBudget(format!(
                "radius must be finite and nonnegative, got {}",
                self.r
            )));
        }
        if let Some((lo, hi)) = self.bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(AttackError::InvalidBudget(format!(
                    "box [{lo},{hi}] is empty"
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), AttackError> {
        if let Some((lo, hi)) = self.bounds {
            for (index, &value) in x.iter().enumerate() {
                if value < lo || value > hi {
                    return Err(AttackError::InputOutsideBox {
                        index,
                        value,
                        lo,
                        hi,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Result of one attack run: the chosen perturbation, the objective value
/// at every evaluated iterate, and bookkeeping flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub epsilon_star: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Every gradient encountered was exactly zero; the attack never moved.
    pub zero_gradient: bool,
}

/// Project ε onto B_r(0) ∩ (box − x).
///
/// L∞ intersects two axis-aligned boxes, so the coordinatewise clamp to
/// [max(−r, lo−x_i), min(r, hi−x_i)] is the exact Euclidean projection. L2
/// alternates box clamping with rescaling onto the ball until the iterate
/// stops moving; since the feasible region contains 0, one clamp plus one
/// rescale already lands inside the intersection.
pub fn project(epsilon: &[f64], x: &[f64], budget: &AttackBudget) -> Result<Vec<f64>, AttackError> {
    budget.validate()?;
    budget.check_input(x)?;
    if epsilon.len() != x.len() {
        return Err(AttackError::DimensionMismatch(format!(
            "epsilon has {} coordinates, x has {}",
            epsilon.len(),
            x.len()
        )));
    }
    let r = budget.r;
    match budget.norm {
        Norm::Linf => Ok(epsilon
            .iter()
            .zip(x)
            .map(|(&e, &xi)| {
                let (mut lo_i, mut hi_i) = (-r, r);
                if let Some((lo, hi)) = budget.bounds {
                    lo_i = lo_i.max(lo - xi);
                    hi_i = hi_i.min(hi - xi);
                }
                e.clamp(lo_i, hi_i)
            })
            .collect()),
        Norm::L2 => {
            let mut current = epsilon.to_vec();
            for _ in 0..L2_PROJECT_MAX_ROUNDS {
                let mut next = current.clone();
                if let Some((lo, hi)) = budget.bounds {
                    for (e, &xi) in next.iter_mut().zip(x) {
                        *e = e.clamp(lo - xi, hi - xi);
                    }
                }
                let norm = l2_norm(&next);
                if norm > r {
                    let scale = r / norm;
                    for e in next.iter_mut() {
                        *e *= scale;
                    }
                }
                let moved = max_abs_diff(&next, &current);
                current = next;
                if moved < L2_PROJECT_TOL {
                    break;
                }
            }
            Ok(current)
        }
    }
}

/// Draw ε uniformly from the budget ball (ignoring the box; projection
/// happens when an attack starts). Deterministic per generator state.
pub fn sample_uniform_ball(
    dim: usize,
    budget: &AttackBudget,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, AttackError> {
    budget.validate()?;
    if dim == 0 {
        return Err(AttackError::DimensionMismatch(
            "zero-dimensional input".into(),
        ));
    }
    let r = budget.r;
    if r == 0.0 {
        return Ok(vec![0.0; dim]);
    }
    match budget.norm {
        Norm::Linf => Ok((0..dim).map(|_| rng.random_range(-r..=r)).collect()),
        Norm::L2 => {
            let direction = loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = l2_norm(&v);
                if n > 0.0 {
                    break v.into_iter().map(|c| c / n).collect::<Vec<f64>>();
                }
            };
            let u: f64 = rng.random();
            let radius = r * u.powf(1.0 / dim as f64);
            Ok(direction.into_iter().map(|c| c * radius).collect())
        }
    }
}

/// Certify that a perturbation obeys the budget and box up to
/// [`FEASIBILITY_TOL`] slack.
pub fn certify(epsilon: &[f64], x: &[f64], budget: &AttackBudget) -> Result<(), AttackError> {
    budget.validate()?;
    if epsilon.len() != x.len() {
        return Err(AttackError::DimensionMismatch(format!(
            "epsilon has {} coordinates, x has {}",
            epsilon.len(),
            x.len()
        )));
    }
    let norm = match budget.norm {
        Norm::Linf => epsilon.iter().fold(0.0f64, |acc, &e| acc.max(e.abs())),
        Norm::L2 => l2_norm(epsilon),
    };
    if norm > budget.r + FEASIBILITY_TOL {
        return Err(AttackError::BudgetViolated { norm, r: budget.r });
    }
    if let Some((lo, hi)) = budget.bounds {
        for (index, (&e, &xi)) in epsilon.iter().zip(x).enumerate() {
            let value = xi + e;
            if value < lo - FEASIBILITY_TOL || value > hi + FEASIBILITY_TOL {
                return Err(AttackError::BoxViolated {
                    index,
                    value,
                    lo,
                    hi,
                });
            }
        }
    }
    Ok(())
}

/// Adam moment decay rates and the denominator fuzz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// Running Adam moments for one optimized vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        Self {
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advance the moments with a new gradient and return the bias-corrected
    /// update eta·m̂/(√v̂ + eps). Callers add it for ascent, subtract for
    /// descent.
    pub fn step(&mut self, grad: &[f64], eta: f64) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient shape changed mid-run");
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps_hat,
        } = self.config;
        let mc = 1.0 - beta1.powi(self.t as i32);
        let vc = 1.0 - beta2.powi(self.t as i32);
        let mut update = vec![0.0; grad.len()];
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / mc;
            let v_hat = self.v[i] / vc;
            update[i] = eta * m_hat / (v_hat.sqrt() + eps_hat);
        }
        update
    }
}

/// Settings for the set-size attack: relaxation temperature, iteration
/// budget, Adam learning rate, and whether the constant true-class σ(0)=0.5
/// term stays in the reported objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpsaConfig {
    pub t1: f64,
    pub steps: usize,
    pub eta: f64,
    pub adam: AdamConfig,
    pub include_true_class: bool,
}

impl Default for OpsaConfig {
    fn default() -> Self {
        Self {
            t1: 1.0,
            steps: 10,
            eta: 2.0 / 255.0,
            adam: AdamConfig::default(),
            include_true_class: true,
        }
    }
}

impl OpsaConfig {
    fn validate(&self) -> Result<(), AttackError> {
        for (what, value) in [("T1", self.t1), ("eta", self.eta)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(AttackError::NonPositive { what, value });
            }
        }
        if self.steps == 0 {
            return Err(AttackError::NonPositive {
                what: "steps",
                value: 0.0,
            });
        }
        Ok(())
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|&e| e * e).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs()))
}

/// Sign with sign(0) = 0, so a dead gradient moves nothing.
fn step_sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add(x: &[f64], eps: &[f64]) -> Vec<f64> {
    x.iter().zip(eps).map(|(&a, &b)| a + b).collect()
}

/// Cross-entropy value and its gradient with respect to the input point.
fn ce_and_input_grad(model: &Mlp, point: &[f64], y: usize) -> Result<(f64, Vec<f64>), AttackError> {
    let mut tape = Tape::new();
    let xn = tape.leaf(Tensor::vector(point.to_vec())?);
    let taped = model.record(&mut tape, xn)?;
    let ce = cross_entropy_node(&mut tape, taped.logits, y)?;
    let grads = tape.backward(ce, &[xn])?;
    let g = grads
        .grad(xn)
        .expect("input gradient requested")
        .data()
        .to_vec();
    Ok((grads.value(), g))
}

/// Soft set size at the perturbed point, thresholded at its own true-class
/// logit, and the gradient with respect to the input.
fn opsa_objective_and_grad(
    model: &Mlp,
    point: &[f64],
    y: usize,
    config: &OpsaConfig,
) -> Result<(f64, Vec<f64>), AttackError> {
    let mut tape = Tape::new();
    let xn = tape.leaf(Tensor::vector(point.to_vec())?);
    let taped = model.record(&mut tape, xn)?;
    let tau = tape.index(taped.logits, y)?;
    let size = soft_set_size_node(&mut tape, taped.logits, tau, config.t1)?;
    let objective = if config.include_true_class {
        size
    } else {
        let half = tape.constant_scalar(0.5)?;
        tape.sub(size, half)?
    };
    let grads = tape.backward(objective, &[xn])?;
    let g = grads
        .grad(xn)
        .expect("input gradient requested")
        .data()
        .to_vec();
    Ok((grads.value(), g))
}

/// Single-step sign attack on cross-entropy. A dead gradient yields ε = 0
/// with the flag set.
pub fn fgsm(
    model: &Mlp,
    x: &[f64],
    y: usize,
    budget: &AttackBudget,
) -> Result<AttackOutcome, AttackError> {
    budget.validate()?;
    budget.check_input(x)?;
    let (ce_clean, g) = ce_and_input_grad(model, x, y)?;
    let zero_gradient = g.iter().all(|&v| v == 0.0);
    let raw: Vec<f64> = match budget.norm {
        Norm::Linf => g.iter().map(|&v| budget.r * step_sign(v)).collect(),
        Norm::L2 => {
            let n = l2_norm(&g);
            if n == 0.0 {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|&v| budget.r * v / n).collect()
            }
        }
    };
    let epsilon_star = project(&raw, x, budget)?;
    let ce_final = cross_entropy(&model.forward_logits(&add(x, &epsilon_star))?, y)?;
    Ok(AttackOutcome {
        epsilon_star,
        objective_trace: vec![ce_clean, ce_final],
        converged: true,
        iterations: 1,
        zero_gradient,
    })
}

/// Iterated sign-gradient ascent on cross-entropy, projected after every
/// step, starting from a uniform ball draw.
pub fn pgd(
    model: &Mlp,
    x: &[f64],
    y: usize,
    budget: &AttackBudget,
    steps: usize,
    step_size: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome, AttackError> {
    let init = sample_uniform_ball(x.len(), budget, rng)?;
    pgd_from_init(model, x, y, budget, steps, step_size, &init)
}

/// PGD from an explicit starting perturbation. With a zero start, one step
/// of size r reproduces the single-step sign attack exactly.
pub fn pgd_from_init(
    model: &Mlp,
    x: &[f64],
    y: usize,
    budget: &AttackBudget,
    steps: usize,
    step_size: f64,
    init: &[f64],
) -> Result<AttackOutcome, AttackError> {
    budget.validate()?;
    budget.check_input(x)?;
    if steps == 0 {
        return Err(AttackError::NonPositive {
            what: "steps",
            value: 0.0,
        });
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(AttackError::NonPositive {
            what: "step_size",
            value: step_size,
        });
    }
    let mut eps = project(init, x, budget)?;
    let mut trace = Vec::with_capacity(steps + 1);
    let mut zero_gradient = true;
    for _ in 0..steps {
        debug_assert!(certify(&eps, x, budget).is_ok());
        let (ce, g) = ce_and_input_grad(model, &add(x, &eps), y)?;
        trace.push(ce);
        if g.iter().any(|&v| v != 0.0) {
            zero_gradient = false;
        }
        let moved: Vec<f64> = match budget.norm {
            Norm::Linf => eps
                .iter()
                .zip(&g)
                .map(|(&e, &gv)| e + step_size * step_sign(gv))
                .collect(),
            Norm::L2 => {
                let n = l2_norm(&g);
                if n == 0.0 {
                    eps.clone()
                } else {
                    eps.iter()
                        .zip(&g)
                        .map(|(&e, &gv)| e + step_size * gv / n)
                        .collect()
                }
            }
        };
        eps = project(&moved, x, budget)?;
    }
    let ce_final = cross_entropy(&model.forward_logits(&add(x, &eps))?, y)?;
    trace.push(ce_final);
    Ok(AttackOutcome {
        epsilon_star: eps,
        objective_trace: trace,
        converged: true,
        iterations: steps,
        zero_gradient,
    })
}

/// The set-size attack: projected Adam ascent on the soft set size with the
/// threshold recomputed from the perturbed true-class logit each iteration.
pub fn opsa(
    model: &Mlp,
    x: &[f64],
    y: usize,
    budget: &AttackBudget,
    config: &OpsaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome, AttackError> {
    let init = sample_uniform_ball(x.len(), budget, rng)?;
    opsa_from_init(model, x, y, budget, config, &init)
}

/// Set-size attack from an explicit starting perturbation.
///
/// Stops after `steps` Adam updates or as soon as an update moves ε by less
/// than [`CONVERGENCE_TOL`] in the ∞-norm; returns the best-objective
/// iterate seen, with ties resolved to the earliest.
pub fn opsa_from_init(
    model: &Mlp,
    x: &[f64],
    y: usize,
    budget: &AttackBudget,
    config: &OpsaConfig,
    init: &[f64],
) -> Result<AttackOutcome, AttackError> {
    budget.validate()?;
    budget.check_input(x)?;
    config.validate()?;
    let mut eps = project(init, x, budget)?;
    let mut adam = AdamState::new(x.len(), config.adam);
    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut best_objective = f64::NEG_INFINITY;
    let mut best_eps = eps.clone();
    let mut converged = false;
    let mut iterations = 0;
    let mut zero_gradient = true;
    loop {
        debug_assert!(certify(&eps, x, budget).is_ok());
        let (objective, g) = opsa_objective_and_grad(model, &add(x, &eps), y, config)?;
        trace.push(objective);
        if objective > best_objective {
            best_objective = objective;
            best_eps = eps.clone();
        }
        if converged || iterations == config.steps {
            break;
        }
        if g.iter().any(|&v| v != 0.0) {
            zero_gradient = false;
        }
        let update = adam.step(&g, config.eta);
        let moved = add(&eps, &update);
        let next = project(&moved, x, budget)?;
        if max_abs_diff(&next, &eps) < CONVERGENCE_TOL {
            converged = true;
        }
        eps = next;
        iterations += 1;
    }
    Ok(AttackOutcome {
        epsilon_star: best_eps,
        objective_trace: trace,
        converged,
        iterations,
        zero_gradient,
    })
}

/// Which attack the dataset driver runs per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackMethod {
    Fgsm,
    Pgd { steps: usize, step_size: f64 },
    Opsa(OpsaConfig),
}

/// Attack every row of a dataset in parallel. Each sample draws from its own
/// derived RNG stream, so the result is identical under any scheduling and
/// any thread count.
pub fn attack_dataset(
    model: &Mlp,
    data: &Dataset,
    budget: &AttackBudget,
    method: &AttackMethod,
    seed: u64,
) -> Result<Vec<AttackOutcome>, AttackError> {
    budget.validate()?;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = data.row(i);
            let mut rng = stream_rng(seed, "attack", i as u64);
            match method {
                AttackMethod::Fgsm => fgsm(model, x, y, budget),
                AttackMethod::Pgd { steps, step_size } => {
                    pgd(model, x, y, budget, *steps, *step_size, &mut rng)
                }
                AttackMethod::Opsa(config) => opsa(model, x, y, budget, config, &mut rng),
            }
        })
        .collect()
}

/// Apply per-row perturbations, certifying each and clamping the sums back
/// into the box to absorb last-bit rounding.
pub fn perturbed_features(
    data: &Dataset,
    outcomes: &[AttackOutcome],
    budget: &AttackBudget,
) -> Result<Vec<Vec<f64>>, AttackError> {
    if outcomes.len() != data.len() {
        return Err(AttackError::DimensionMismatch(format!(
            "{} outcomes for {} rows",
            outcomes.len(),
            data.len()
        )));
    }
    let mut rows = Vec::with_capacity(data.len());
    for (i, outcome) in outcomes.iter().enumerate() {
        let (x, _) = data.row(i);
        certify(&outcome.epsilon_star, x, budget)?;
        let mut point = add(x, &outcome.epsilon_star);
        if let Some((lo, hi)) = budget.bounds {
            for v in point.iter_mut() {
                *v = v.clamp(lo, hi);
            }
        }
        rows.push(point);
    }
    Ok(rows)
}
