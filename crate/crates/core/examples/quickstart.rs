//! Train a classifier on synthetic blobs, calibrate a threshold, then
//! measure what the set-size attack does to coverage and set size when it
//! perturbs both the calibration and the test rows.

use opsa_core::attacks::{
    attack_dataset, perturbed_features, AttackBudget, AttackMethod, OpsaConfig,
};
use opsa_core::conformal::{
    avg_size, calibrate_from_logits, coverage, sets_from_logits, LossWeights,
};
use opsa_core::data::{gen_blobs, split, Dataset, SplitSpec};
use opsa_core::models::{batch_logits, Mlp, MlpConfig};
use opsa_core::training::{train_standard, OptimizerKind, TrainConfig};

type Error = Box<dyn std::error::Error>;

fn set_metrics(
    model: &Mlp,
    cal: &Dataset,
    test: &Dataset,
    alpha: f64,
) -> Result<(f64, f64), Error> {
    let cal_logits = batch_logits(model, cal.features())?;
    let calibration = calibrate_from_logits(&cal_logits, cal.labels(), alpha)?;
    let test_logits = batch_logits(model, test.features())?;
    let sets = sets_from_logits(&test_logits, calibration.tau);
    Ok((coverage(&sets, test.labels())?, avg_size(&sets)?))
}

fn main() -> Result<(), Error> {
    let blobs = gen_blobs(10, 16, 100, 0.07, (0.0, 1.0), 1)?;
    let parts = split(&blobs, &SplitSpec::new(0.4, 0.3, 0.3, 2)?)?;

    let config = TrainConfig {
        model: MlpConfig {
            input_dim: 16,
            hidden: vec![24],
            num_classes: 10,
        },
        epochs: 8,
        batch_size: 32,
        cal_fraction: 0.5,
        alpha: 0.1,
        weights: LossWeights::new(0.5, 1.0)?,
        budget: AttackBudget::linf(0.15),
        attack: OpsaConfig {
            t1: 1.0,
            steps: 15,
            eta: 0.025,
            ..OpsaConfig::default()
        },
        pgd_steps: 5,
        pgd_step_size: 0.015,
        optimizer: OptimizerKind::Sgd { lr: 0.2 },
        seed: 7,
        attack_calibration: false,
    };
    let model = train_standard(&parts.train, &config, None)?.model;

    let (cov, size) = set_metrics(&model, &parts.cal, &parts.test, config.alpha)?;
    println!("clean:    coverage {cov:.3}, avg size {size:.3}");

    let method = AttackMethod::Opsa(config.attack.clone());
    let attacked = |data: &Dataset, seed: u64| -> Result<Dataset, Error> {
        let outcomes = attack_dataset(&model, data, &config.budget, &method, seed)?;
        Ok(data.with_features(perturbed_features(data, &outcomes, &config.budget)?)?)
    };
    let (cov, size) = set_metrics(
        &model,
        &attacked(&parts.cal, 8)?,
        &attacked(&parts.test, 9)?,
        config.alpha,
    )?;
    println!("attacked: coverage {cov:.3}, avg size {size:.3}");
    Ok(())
}
