use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{kernels, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Only the first stage, under its own loss.
    Stage1,
    /// Every stage, under the mean of the stage losses.
    Joint,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Stage1 => "stage1",
            Phase::Joint => "joint",
        })
    }
}

/// Soft Dice loss `1 - (2 Σpg + s) / (Σp + Σg + s)` over every element.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, smooth: T) -> Result<T> {
    kernels::soft_dice(pred, truth, smooth)
}

/// Loss of a phase from per-stage probability maps: the first stage's Dice
/// loss in [`Phase::Stage1`], the mean over stages in [`Phase::Joint`].
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    phase: Phase,
    stage_probs: &[Var],
    truth: &Tensor<T>,
    smooth: T,
) -> Result<Var> {
    if stage_probs.is_empty() {
        return Err(Error::config("no stage outputs"));
    }
    match phase {
        Phase::Stage1 => tape.dice_loss(stage_probs[0], truth, smooth),
        Phase::Joint => {
            let losses = stage_probs
                .iter()
                .map(|&p| tape.dice_loss(p, truth, smooth))
                .collect::<Result<Vec<_>>>()?;
            let sum = tape.sum_all(&losses)?;
            Ok(tape.scale(sum, T::one() / T::from_usize(losses.len()).expect("stage count")))
        }
    }
}
