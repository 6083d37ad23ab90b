use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::loss::Phase;

/// One epoch. Serialized field order: epoch, phase, train_loss,
/// stage_losses, val_loss, val_dice, val_iou, inactive_grad_norm, seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean training loss of the phase objective.
    pub train_loss: f64,
    /// Mean training Dice loss of each evaluated stage.
    pub stage_losses: Vec<f64>,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    /// Gradient norm of parameters the phase does not train.
    pub inactive_grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if rec.epoch <= last.epoch {
                return Err(Error::config(format!(
                    "epoch {} recorded after epoch {}",
                    rec.epoch, last.epoch
                )));
            }
        }
        self.epochs.push(rec);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn best_val(&self) -> Option<&EpochRecord> {
        self.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    }

    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            let _ = writeln!(s, "{}", serde_json::to_string(r).expect("plain record"));
        }
        s
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let mut h = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec = serde_json::from_str(line).map_err(|e| Error::Data(format!("history line {}: {e}", i + 1)))?;
            h.push(rec)?;
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_lines())?;
        Ok(())
    }
}
