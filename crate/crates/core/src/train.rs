//! Evidential pretraining with Adam.

use fgrm_tensor::{Adam, AdamConfig, ParameterSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::DiceCounts;
use crate::model::{self, ModelConfig};
use crate::scenes::{mix_seed, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::config("pretrain.batch_size", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(CoreError::config("pretrain.optimizer.lr", "must be a positive number"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(CoreError::config("pretrain.optimizer.beta1/beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(CoreError::config("pretrain.optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Mean-class Dice of the training predictions made during the epoch.
    pub dice: f64,
}

/// Minimizes the evidential loss over `train`, starting from `init`.
pub fn pretrain(
    model_cfg: &ModelConfig,
    config: &PretrainConfig,
    init: ParameterSet,
    train: &[&SceneSample],
) -> Result<(ParameterSet, Vec<EpochLog>)> {
    config.validate()?;
    model_cfg.check_params(&init)?;
    if train.is_empty() {
        return Err(CoreError::config("train", "training split is empty"));
    }
    let mut params = init;
    let mut adam = Adam::new(config.optimizer, &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut dice = DiceCounts::new(model_cfg.classes);
        let batches = order.chunks(config.batch_size);
        let n_batches = batches.len();
        for (step, chunk) in batches.enumerate() {
            let samples: Vec<&SceneSample> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
            let mask = model::one_hot(&labels, model_cfg.classes, samples.len(), model_cfg.height, model_cfg.width)?;
            let bound = params.bind();
            let pred = model::forward(model_cfg, &bound, &model::batch_input(model_cfg, &samples)?)?;
            let loss = model::evidential_loss(&pred, &mask)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(CoreError::Diverged { epoch, step, loss: value });
            }
            loss.backward()?;
            let grads = bound.grads();
            for (g, name) in grads.iter().zip(bound.names()) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::NonFiniteGradient { name: name.clone() });
                }
            }
            dice.add(&pred.labels(), &labels)?;
            loss_sum += value;
            adam.step(&mut params, &grads);
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n_batches as f64,
            dice: dice.mean_dice(),
        };
        log::info!("pretrain epoch {epoch}: loss {:.5} dice {:.4}", entry.loss, entry.dice);
        log.push(entry);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scene, SceneSpec};

    fn small() -> (ModelConfig, Vec<SceneSample>) {
        let spec = SceneSpec {
            height: 12,
            width: 12,
            ..SceneSpec::default()
        };
        let cfg = ModelConfig {
            height: 12,
            width: 12,
            widths: vec![4],
            ..ModelConfig::default()
        };
        (cfg, (0..4).map(|i| generate_scene(&spec, i)).collect())
    }

    #[test]
    fn one_step_reduces_loss() {
        let (cfg, data) = small();
        let refs: Vec<&SceneSample> = data.iter().take(1).collect();
        let init = model::init_params(&cfg).unwrap();
        let loss_of = |p: &ParameterSet| {
            let labels = refs[0].mask.clone();
            let mask = model::one_hot(&labels, 3, 1, 12, 12).unwrap();
            model::evidential_loss(&model::predict(&cfg, p, &refs).unwrap(), &mask)
                .unwrap()
                .item()
        };
        let config = PretrainConfig {
            epochs: 1,
            batch_size: 1,
            ..PretrainConfig::default()
        };
        let (trained, log) = pretrain(&cfg, &config, init.clone(), &refs).unwrap();
        assert_eq!(log.len(), 1);
        assert!(loss_of(&trained) < loss_of(&init));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (cfg, data) = small();
        let refs: Vec<&SceneSample> = data.iter().collect();
        let config = PretrainConfig {
            epochs: 2,
            ..PretrainConfig::default()
        };
        let run = || pretrain(&cfg, &config, model::init_params(&cfg).unwrap(), &refs).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (cfg, data) = small();
        let refs: Vec<&SceneSample> = data.iter().collect();
        let init = model::init_params(&cfg).unwrap();
        let config = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let (out, log) = pretrain(&cfg, &config, init.clone(), &refs).unwrap();
        assert_eq!(out, init);
        assert!(log.is_empty());
    }
}
