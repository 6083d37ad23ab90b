//! Differentiable kernel layer: tensors in, tensors out, with a tape for
//! reverse-mode gradients and a finite-difference checker.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::ParamStore;
pub use tape::{BnConfig, BnRunning, Gradients, Mode, OpKind, Tape, Var};
