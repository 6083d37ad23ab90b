use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    PlNet,
    UNet,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::PlNet => "plnet",
            Variant::UNet => "unet",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plnet" | "pl-net" => Ok(Variant::PlNet),
            "unet" | "u-net" => Ok(Variant::UNet),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected plnet or unet)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
///
/// The channel count at encoder level `l` (1 = full resolution) is
/// `round(base_channels * ocs * 2^(l-1))`, at least 1. `steps` is the number
/// of encoder-decoder passes per stage; `stage_depths` lists the encoder depth
/// of every stage, shallowest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Output channel scale.
    pub ocs: f64,
    pub steps: usize,
    pub stage_depths: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::plnet()
    }
}

/// Range of channel scales the reference sweep covered.
pub const OCS_SWEEP: (f64, f64) = (0.5, 2.0);

impl NetworkConfig {
    /// Standard PL-Net: 224² RGB input, 32 base channels, two steps, stages of depth 4 and 5.
    pub fn plnet() -> Self {
        Self {
            variant: Variant::PlNet,
            input_size: 224,
            in_channels: 3,
            out_channels: 1,
            base_channels: 32,
            ocs: 1.0,
            steps: 2,
            stage_depths: vec![4, 5],
        }
    }

    /// Classic five-level U-Net with 64 base channels.
    pub fn unet() -> Self {
        Self {
            variant: Variant::UNet,
            input_size: 224,
            in_channels: 3,
            out_channels: 1,
            base_channels: 64,
            ocs: 1.0,
            steps: 1,
            stage_depths: vec![5],
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::PlNet => Self::plnet(),
            Variant::UNet => Self::unet(),
        }
    }

    pub fn with_ocs(mut self, ocs: f64) -> Self {
        self.ocs = ocs;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_depths(mut self, depths: &[usize]) -> Self {
        self.stage_depths = depths.to_vec();
        self
    }

    pub fn max_depth(&self) -> usize {
        self.stage_depths.iter().copied().max().unwrap_or(0)
    }

    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Channels at encoder level `level`; level 0 is the input image.
    pub fn channels(&self, level: usize) -> usize {
        if level == 0 {
            return self.in_channels;
        }
        let raw = self.base_channels as f64 * self.ocs * 2f64.powi(level as i32 - 1);
        ((raw + 0.5).floor() as usize).max(1)
    }

    /// Smallest input side the depth allows (the side must be a multiple of it).
    pub fn size_multiple(&self) -> usize {
        1 << self.max_depth().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ocs.is_finite() && self.ocs > 0.0) {
            return Err(Error::config(format!(
                "ocs must be a positive number, got {}",
                self.ocs
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.stage_depths.is_empty() {
            return Err(Error::config("at least one stage depth is required"));
        }
        if self.stage_depths.iter().any(|&d| d < 2) {
            return Err(Error::config("stage depths must be at least 2"));
        }
        if self.stage_depths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "stage depths must be strictly increasing, got {:?}",
                self.stage_depths
            )));
        }
        if self.variant == Variant::UNet && (self.stage_depths.len() != 1 || self.steps != 1) {
            return Err(Error::config("the U-Net baseline has one stage and one step"));
        }
        let m = self.size_multiple();
        if self.input_size == 0 || !self.input_size.is_multiple_of(m) {
            return Err(Error::config(format!(
                "input size {} is not divisible by 2^(depth-1) = {m}",
                self.input_size
            )));
        }
        Ok(())
    }
}
