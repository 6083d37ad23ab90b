//! Progressive-learning U-Net (PL-Net) for binary segmentation.
//!
//! The crate is generic over the element type ([`Scalar`]): training runs in
//! `f32`, gradient verification in `f64`. Aliases for both live at the root.

pub mod arch;
pub mod checkpoint;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
mod scalar;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = nn::Tape<f32>;
pub type Tape64 = nn::Tape<f64>;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
