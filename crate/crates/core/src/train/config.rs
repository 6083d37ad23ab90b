use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BnScope;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam first-moment decay (the "momentum").
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Epoch budget over both phases.
    pub max_epochs: usize,
    /// Epoch cap of the stage-1 phase; `None` means a quarter of `max_epochs`.
    pub stage1_epochs: Option<usize>,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Two-phase training; when off, the joint loss is optimized from the start.
    pub epl_enabled: bool,
    pub dice_smooth: f64,
    /// Averages a Dice term on the fused output into the joint loss.
    pub fused_loss: bool,
    pub augment: bool,
    /// Batch-norm running-statistics momentum (weight on the old value).
    pub bn_momentum: f64,
    pub bn_scope: BnScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 200,
            stage1_epochs: None,
            early_stop_patience: 20,
            min_delta: 1e-4,
            seed: 0,
            epl_enabled: true,
            dice_smooth: 1.0,
            fused_loss: false,
            augment: true,
            bn_momentum: 0.99,
            bn_scope: BnScope::Use,
        }
    }
}

impl TrainConfig {
    pub fn stage1_budget(&self) -> usize {
        self.stage1_epochs
            .unwrap_or(self.max_epochs / 4)
            .clamp(1, self.max_epochs.saturating_sub(1).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("dice_smooth", self.dice_smooth),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("bn_momentum", self.bn_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return Err(Error::config("min_delta must be non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("batch_size, max_epochs and patience must be positive"));
        }
        if self.early_stop_patience >= self.max_epochs && self.max_epochs > 1 {
            log::warn!(
                "patience {} is not below the epoch budget {}; early stopping cannot fire",
                self.early_stop_patience,
                self.max_epochs
            );
        }
        Ok(())
    }
}

/// Geometric augmentation; each transform fires independently with `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_degrees: f64,
    pub shift_fraction: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: 25.0,
            shift_fraction: 0.15,
            horizontal_flip: true,
            vertical_flip: true,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return Err(Error::config("rotation_degrees must lie in [0, 180]"));
        }
        if !(self.shift_fraction >= 0.0 && self.shift_fraction < 1.0) {
            return Err(Error::config("shift_fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("augmentation probability must lie in [0, 1]"));
        }
        Ok(())
    }
}
