use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, PredictionSet, PreparedScene};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::evaluate_report;
use crate::scene::{augment, AugConfig, NormalizedScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    /// Scenes per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays; `None` keeps it constant.
    pub lr_decay_every: Option<u32>,
    pub adam: AdamConfig,
    pub augment: bool,
    pub augmentation: AugConfig,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 36,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_decay_every: Some(10),
            adam: AdamConfig::default(),
            augment: true,
            augmentation: AugConfig::default(),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("lr must be positive, got {}", self.lr)));
        }
        if self.lr_decay_every == Some(0) {
            return Err(Error::validation("lr_decay_every must be positive"));
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a 0-based epoch.
pub fn lr_at_epoch(config: &TrainConfig, epoch: u32) -> f64 {
    match config.lr_decay_every {
        Some(every) => config.lr * config.lr_decay.powi((epoch / every) as i32),
        None => config.lr,
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u32,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            adam: AdamState::default(),
            epoch: 0,
        }
    }
}

/// A normalized scene with ground truth and a name for diagnostics.
#[derive(Clone, Debug)]
pub struct TrainingScene {
    pub name: String,
    pub scene: NormalizedScene,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "minADE6")]
    pub min_ade6: f64,
    #[serde(rename = "minFDE6")]
    pub min_fde6: f64,
    #[serde(rename = "MR6")]
    pub mr6: f64,
    #[serde(rename = "minADE1")]
    pub min_ade1: f64,
    #[serde(rename = "minFDE1")]
    pub min_fde1: f64,
    #[serde(rename = "MR1")]
    pub mr1: f64,
    pub wall_seconds: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs epochs `state.epoch .. config.epochs`. Shuffling and augmentation
/// are derived from `(seed, epoch)`, so a run resumed from a saved state
/// matches an uninterrupted one. `on_epoch` sees the log line and the state
/// after each epoch. Metrics in the log come from the epoch's own training
/// forward passes.
pub fn train<F>(
    model: &Model,
    state: &mut TrainState,
    data: &[TrainingScene],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    for s in data {
        let n = s.scene.scene.future.as_ref().map_or(0, Vec::len);
        if n != model.config.horizon {
            return Err(Error::validation(format!(
                "scene {} has {n} future steps, model predicts {}",
                s.name, model.config.horizon
            )));
        }
    }
    let mut cache: Vec<Option<PreparedScene>> = vec![None; data.len()];

    while state.epoch < config.epochs {
        let started = Instant::now();
        let epoch = state.epoch;
        let epoch_seed = mix(seed, epoch as u64);
        let lr = lr_at_epoch(config, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        if config.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        }

        let mut loss_sum = 0.0;
        let mut preds: Vec<PredictionSet> = Vec::with_capacity(data.len());
        let mut gts: Vec<Vec<[f64; 2]>> = Vec::with_capacity(data.len());
        for batch in order.chunks(config.batch_size) {
            let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
            for &i in batch {
                let item = &data[i];
                let augmented;
                let (prep, gt) = if config.augment {
                    augmented = augment(&item.scene, mix(epoch_seed, i as u64), &config.augmentation);
                    (model.prepare(&augmented)?, augmented.scene.future.clone())
                } else {
                    if cache[i].is_none() {
                        cache[i] = Some(model.prepare(&item.scene)?);
                    }
                    (cache[i].clone().expect("filled above"), item.scene.scene.future.clone())
                };
                let gt = gt.expect("checked above");
                let mut g = Graph::new();
                let out = model.forward(&mut g, &state.params, &prep)?;
                let terms = model.loss(&mut g, out, &gt)?;
                let value = g.value(terms.total).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        scene: item.name.clone(),
                        value,
                    });
                }
                loss_sum += value;
                let scene_grads = g.param_grads(&g.backward(terms.total)?, &state.params);
                for (name, grad) in scene_grads {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&grad),
                        None => {
                            grads.insert(name, grad);
                        }
                    }
                }
                preds.push(terms.prediction);
                gts.push(gt);
            }
            for grad in grads.values_mut() {
                grad.scale_in_place(1.0 / batch.len() as f64);
            }
            adam_step(&mut state.params, &grads, &mut state.adam, lr, &config.adam)?;
        }

        let report = evaluate_report(&preds, &gts)?;
        state.epoch += 1;
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            min_ade6: report.min_ade_6,
            min_fde6: report.min_fde_6,
            mr6: report.mr_6,
            min_ade1: report.min_ade_1,
            min_fde1: report.min_fde_1,
            mr1: report.mr_1,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log, state)?;
    }
    Ok(())
}
