//! Losses, optimizer, augmentation, early stopping and the two-phase
//! training loop.

mod adam;
mod augment;
mod config;
mod early_stop;
mod history;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use augment::{apply_augment, augment, AugmentParams};
pub use config::{AugmentConfig, TrainConfig};
pub use early_stop::{early_stop_update, Decision, EarlyStopping};
pub use history::{EpochRecord, TrainHistory};
pub use loss::{dice_loss, total_loss, Phase};
pub use trainer::{stream_rng, train_epl, validate, NoObserver, TrainObserver, TrainOutcome, Validation};
