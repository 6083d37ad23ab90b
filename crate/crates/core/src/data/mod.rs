//! Samples, preprocessing, fold splits, the synthetic generator and PNG I/O.

mod io;
mod preprocess;
mod split;
mod synth;

pub use io::{load_dataset, read_rgb_png, write_dataset, write_gray_png, Dataset};
pub use preprocess::{gray_world_normalize, preprocess, resize};
pub use split::{kfold_split, SplitPlan};
pub use synth::{synth_ellipses, synth_generate, Ellipse, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary mask. The image is `(1, 3, H, W)` in `[0, 1]`,
/// the mask `(1, 1, H, W)` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (i, m) = (self.image.shape(), self.mask.shape());
        if i.batch != 1 || i.channels != 3 || m.batch != 1 || m.channels != 1 {
            return Err(Error::Data(format!(
                "{}: expected (1,3,H,W) image and (1,1,H,W) mask, got {i} and {m}",
                self.id
            )));
        }
        if i.height != m.height || i.width != m.width {
            return Err(Error::Data(format!(
                "{}: image {i} and mask {m} differ in size",
                self.id
            )));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("{}: image values outside [0, 1]", self.id)));
        }
        if !self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Data(format!("{}: mask is not binary", self.id)));
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.height, s.width)
    }

    /// Fraction of foreground pixels.
    pub fn foreground(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.len() as f64
    }
}
