//! Cross-entropy training, Adam, the learning-rate schedule and
//! self-critical fine-tuning.

mod adam;
mod dataset;
mod eval;
mod scst;
mod trainer;

pub use adam::{adam_step, clip_global_norm, AdamParams, OptimizerState};
pub use dataset::{CaptionBatch, Dataset};
pub use eval::{decode_all, score_captions, Strategy, Scores};
pub use scst::{scst_step, scst_surrogate, ScstStats};
pub use trainer::{DirSink, EpochSink, LogRecord, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Xe,
    Scst,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Xe => "xe",
            Phase::Scst => "scst",
        })
    }
}

/// Where a training run stands: `epoch` epochs of `phase` are complete.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    pub epoch: usize,
    /// Optimizer steps taken over the whole run.
    pub step: u64,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            phase: Phase::Xe,
            epoch: 0,
            step: 0,
        }
    }
}

/// Optimization hyperparameters. `Default` holds the full-scale schedule:
/// 9 XE epochs at 3e-5 halved for the last two, then 4 SCST epochs at
/// 7.5e-6 halved after two, Adam (0.9, 0.999, 1e-8), batch 40.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub xe_epochs: usize,
    pub xe_lr: f64,
    /// 1-based XE epochs from which the rate is multiplied by `decay_factor`
    /// (once per point reached).
    pub xe_decay_points: Vec<usize>,
    pub scst_epochs: usize,
    pub scst_lr: f64,
    pub scst_decay_points: Vec<usize>,
    pub decay_factor: f64,
    /// XE optimizer steps over which the rate ramps linearly up to its
    /// scheduled value; 0 disables warmup.
    pub xe_warmup_steps: u64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm limit for gradients; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Sampled rollouts per image in SCST.
    pub scst_samples: usize,
    pub scst_temperature: f64,
    /// Longest generated caption (EOS included) during SCST and validation.
    pub max_decode_len: usize,
    /// Cap on validation images scored after each epoch; 0 disables validation.
    pub val_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            xe_epochs: 9,
            xe_lr: 3e-5,
            xe_decay_points: vec![8],
            scst_epochs: 4,
            scst_lr: 7.5e-6,
            scst_decay_points: vec![3],
            decay_factor: 0.5,
            xe_warmup_steps: 0,
            batch_size: 40,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            seed: 42,
            scst_samples: 1,
            scst_temperature: 1.0,
            max_decode_len: 20,
            val_images: usize::MAX,
        }
    }
}

impl TrainConfig {
    /// Schedule for training the toy model from scratch on one core.
    pub fn toy() -> Self {
        TrainConfig {
            xe_epochs: 30,
            xe_lr: 1.5e-3,
            xe_decay_points: vec![22, 27],
            xe_warmup_steps: 800,
            scst_epochs: 2,
            scst_lr: 2e-5,
            scst_decay_points: vec![],
            batch_size: 25,
            max_decode_len: 20,
            val_images: 200,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("xe_lr", self.xe_lr), ("scst_lr", self.scst_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor {} outside (0, 1]", self.decay_factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam needs betas in [0, 1) and a positive epsilon".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if self.scst_samples == 0 || !(self.scst_temperature > 0.0) || self.max_decode_len == 0 {
            return Err(Error::Config("SCST needs at least one sample, a positive temperature and max_decode_len".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::Xe => self.xe_epochs,
            Phase::Scst => self.scst_epochs,
        }
    }
}

/// Learning rate for 1-based `epoch` of `phase`.
pub fn lr_schedule(cfg: &TrainConfig, phase: Phase, epoch: usize) -> Result<f64> {
    let (base, points, total) = match phase {
        Phase::Xe => (cfg.xe_lr, &cfg.xe_decay_points, cfg.xe_epochs),
        Phase::Scst => (cfg.scst_lr, &cfg.scst_decay_points, cfg.scst_epochs),
    };
    if epoch == 0 || epoch > total {
        return Err(Error::invalid(
            "lr_schedule",
            format!("{phase} epoch {epoch} outside 1..={total}"),
        ));
    }
    let decays = points.iter().filter(|&&p| epoch >= p).count();
    Ok(base * cfg.decay_factor.powi(decays as i32))
}

/// Summed negative log-likelihood over positions where `mask` is true.
/// `logits` is `[B, T, V]`; `targets` and `mask` are `B·T`.
pub fn xe_loss<F: Element>(tape: &mut Tape<F>, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
    let dims = tape.value(logits).dims();
    let rows: usize = dims[..dims.len() - 1].iter().product();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::invalid(
            "xe_loss",
            format!("{rows} logit rows for {} targets and {} mask entries", targets.len(), mask.len()),
        ));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    tape.cross_entropy(logits, targets, &weights)
}

#[cfg(test)]
mod tests;
