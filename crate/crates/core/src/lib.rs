//! Conformal prediction under adversarial perturbation: calibrated
//! threshold classifiers, differentiable set-size relaxations, attacks that
//! inflate prediction sets, and training loops that resist them.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: dense tensors and a reverse-mode tape sized for small
//!   feedforward networks.
//! * [`seeds`]: named, derived RNG streams so every pipeline stage draws
//!   from its own reproducible source.
//! * [`models`]: relu MLPs with recorded forward passes and exact
//!   round-trip JSON serialization.
//! * [`conformal`]: threshold calibration, prediction sets, soft set sizes,
//!   and coverage/size/stratified-violation metrics.
//! * [`data`]: synthetic Gaussian blob generation, CSV datasets, seeded
//!   splits.
//! * [`attacks`]: feasible-set projections plus FGSM, PGD, and the
//!   set-size-maximizing attack.
//! * [`training`]: standard, PGD-adversarial, and conformal adversarial
//!   training loops.
//!
//! Everything is deterministic given a root seed: parallel attack drivers
//! derive one stream per sample and collect in index order, so thread
//! scheduling never changes a result.

pub mod attacks;
pub mod autodiff;
pub mod conformal;
pub mod data;
pub mod models;
pub mod seeds;
pub mod training;

pub use attacks::{
    attack_dataset, certify, fgsm, opsa, opsa_from_init, perturbed_features, pgd, pgd_from_init,
    project, sample_uniform_ball, AttackBudget, AttackError, AttackMethod, AttackOutcome, Norm,
    OpsaConfig,
};
pub use autodiff::{sigmoid, AutodiffError, Tape, Tensor};
pub use conformal::{
    avg_size, calibrate_from_logits, classification_loss, conformity_score, coverage,
    prediction_set, sets_from_logits, soft_set_size, sscv, thr_quantile, total_training_loss,
    CalibrationResult, ConformalError, LossWeights, PredictionSet, SizeStrata,
};
pub use data::{gen_blobs, CsvSchema, DataError, Dataset, SplitResult, SplitSpec};
pub use models::{batch_logits, cross_entropy, Mlp, MlpConfig, ModelError};
pub use seeds::{content_hash, derive_seed, stream_rng};
pub use training::{
    train_opsa_at, train_pgd_at, train_standard, EpochStats, OptimizerKind, TrainConfig,
    TrainError, TrainOutput,
};
