use serde::{Deserialize, Serialize};

use crate::data::CropConfig;
use crate::error::{Error, Result};

/// Optimization recipe for pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Scaled by `batch_size / 256` to give the peak rate.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_epochs: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Apply RandomResizedCrop to pretraining images.
    pub augment: bool,
    pub crop: CropConfig,
    /// Batches buffered between the data producer thread and the trainer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            base_lr: 1.5e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            warmup_epochs: 5,
            lambda_start: 0.996,
            lambda_end: 1.0,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
            crop: CropConfig::default(),
            queue_depth: 4,
        }
    }

    /// ImageNet-1K pretraining recipe.
    pub fn paper() -> Self {
        Self {
            epochs: 800,
            batch_size: 2048,
            base_lr: 1.5e-4,
            warmup_epochs: 40,
            crop: CropConfig {
                out_size: 224,
                ..CropConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("train.{f}"), m));
        if self.epochs == 0 {
            return err("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return err(
                "warmup_epochs",
                format!("{} must be below epochs {}", self.warmup_epochs, self.epochs),
            );
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(name, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.lambda_start > 0.0 && self.lambda_start <= self.lambda_end && self.lambda_end <= 1.0) {
            return err(
                "lambda_start",
                format!(
                    "need 0 < lambda_start <= lambda_end <= 1, got ({}, {})",
                    self.lambda_start, self.lambda_end
                ),
            );
        }
        if self.queue_depth == 0 {
            return err("queue_depth", "must be positive".into());
        }
        self.crop.validate()
    }
}
