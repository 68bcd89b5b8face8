//! Mini-batch Adam training loop shared by the learned estimators.

use log::info;
use risloc_autodiff::{clip_global_norm, AdamConfig, AdamState, BoundParams, ParamSet, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_episodes, Episode};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scene::Scene;

/// Which per-episode loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Squared error of the last-frame estimate.
    #[default]
    Final,
    /// Squared error averaged over every frame's estimate.
    Average,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Final => "final",
            LossKind::Average => "average",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Halve the learning rate after each third of `steps`.
    pub lr_decay: bool,
    pub clip_norm: f64,
    pub steps_per_epoch: usize,
    pub validation_size: usize,
    /// Stop after this many epochs without validation improvement (0 = off).
    pub patience: usize,
    pub loss: LossKind,
    pub warmup_samples: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 256,
            lr: 1e-3,
            lr_decay: true,
            clip_norm: 10.0,
            steps_per_epoch: 50,
            validation_size: 512,
            patience: 0,
            loss: LossKind::Final,
            warmup_samples: 10_000,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size and steps_per_epoch must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be > 0".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.steps * self.batch_size
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.lr_decay || self.steps < 3 {
            return self.lr;
        }
        let third = self.steps.div_ceil(3);
        self.lr * 0.5f64.powi((step / third) as i32)
    }
}

/// A model with trainable parameters and a differentiable batch loss.
pub trait Trainable: Clone {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn frames(&self) -> usize;
    fn batch_loss(&self, tape: &mut Tape, bound: &BoundParams, episodes: &[Episode])
        -> Result<Var>;
    /// Mean squared error (m²) of the final estimate.
    fn evaluate_mse(&self, episodes: &[Episode]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub initial_val_mse: Option<f64>,
}

/// Seed of the held-out validation stream for a training seed.
pub fn validation_seed(train_seed: u64) -> u64 {
    derive_seed(train_seed, 0x7A11_DA7E)
}

/// Trains `model` in place and leaves it at the best-validation weights.
pub fn fit<M: Trainable>(
    model: &mut M,
    scene: &Scene,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<(TrainLog, AdamState)> {
    cfg.validate()?;
    let frames = model.frames();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params().values(),
    );
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok((log, adam));
    }
    let val = sample_episodes(
        scene,
        frames,
        validation_seed(seed),
        0,
        cfg.validation_size.max(1),
    )?;
    let initial = model.evaluate_mse(&val)?;
    log.initial_val_mse = Some(initial);
    let mut best = (initial, model.clone());
    let mut since_best = 0;

    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        let mut loss_sum = 0.0;
        let mut count = 0;
        let end = (step + cfg.steps_per_epoch).min(cfg.steps);
        let lr_epoch = cfg.lr_at(step);
        while step < end {
            let start = (step * cfg.batch_size) as u64;
            let batch = sample_episodes(scene, frames, seed, start, cfg.batch_size)?;
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let loss = model.batch_loss(&mut tape, &bound, &batch)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss = {value}"),
                });
            }
            let mut grads_all = tape.backward(loss)?;
            let mut grads = bound.collect(&mut grads_all);
            if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step_with_lr(model.params_mut().values_mut(), &grads, cfg.lr_at(step))?;
            loss_sum += value;
            count += 1;
            step += 1;
        }
        let val_mse = model.evaluate_mse(&val)?;
        if !val_mse.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("validation mse = {val_mse}"),
            });
        }
        info!(
            "epoch {epoch} step {step} lr {lr_epoch:.2e} train {:.3} val {val_mse:.3}",
            loss_sum / count as f64
        );
        log.epochs.push(EpochRecord {
            epoch,
            step,
            lr: lr_epoch,
            train_loss: loss_sum / count as f64,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, model.clone());
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
        epoch += 1;
    }
    *model = best.1;
    Ok((log, adam))
}
