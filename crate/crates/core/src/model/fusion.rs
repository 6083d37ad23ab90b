//! Skip-connection fusion, stage-output fusion and pass unrolling.

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::scalar::Scalar;

/// Features visible to the backward skips of one encoder pass.
///
/// Vectors are indexed by level (index 0 unused).
#[derive(Debug, Clone)]
pub struct StepContext {
    pub stage: usize,
    pub pass: usize,
    /// Depth of the previous stage; 0 for the first stage.
    pub prior_stage_depth: usize,
    /// Encoder input at each level (the image at level 1, pooled features below).
    pub x_in: Vec<Option<Var>>,
    /// Transition outputs of the previous pass.
    pub prior_pass: Vec<Option<Var>>,
    /// Transition outputs of the previous stage's final pass.
    pub prior_stage: Vec<Option<Var>>,
}

impl StepContext {
    pub fn new(stage: usize, pass: usize, depth: usize, prior_stage_depth: usize) -> Self {
        Self {
            stage,
            pass,
            prior_stage_depth,
            x_in: vec![None; depth + 1],
            prior_pass: vec![None; depth + 1],
            prior_stage: vec![None; depth + 1],
        }
    }
}

/// Forward skip: `[encoder feature, upsampled decoder feature]`.
pub fn fuse_forward_skip<T: Scalar>(tape: &mut Tape<T>, enc: Var, up: Var) -> Result<Var> {
    let (a, b) = (tape.shape(enc), tape.shape(up));
    if !a.same_spatial(&b) {
        return Err(Error::Wiring(format!(
            "forward skip joins encoder feature {a} with upsampled feature {b}"
        )));
    }
    tape.concat(&[enc, up])
}

/// Backward skip feeding the step conv of `level`.
///
/// First pass of the first stage: `[x_in, x_in]`. First pass of a later
/// stage: `[previous stage feature, x_in]` on levels the previous stage has,
/// duplication below them. Later passes: `[previous pass feature, x_in]`.
pub fn fuse_backward_skip<T: Scalar>(tape: &mut Tape<T>, ctx: &StepContext, level: usize) -> Result<Var> {
    let x_in = ctx
        .x_in
        .get(level)
        .copied()
        .flatten()
        .ok_or_else(|| Error::Wiring(format!("no encoder input at level {level}")))?;
    let feedback = match (ctx.pass, ctx.stage) {
        (1, 1) => None,
        (1, _) if level > ctx.prior_stage_depth => None,
        (1, s) => Some(
            ctx.prior_stage[level]
                .ok_or_else(|| Error::Wiring(format!("stage {s} level {level}: previous stage feature missing")))?,
        ),
        (p, s) => Some(ctx.prior_pass[level].ok_or_else(|| {
            Error::Wiring(format!(
                "stage {s} pass {p} level {level}: previous pass feature missing"
            ))
        })?),
    };
    match feedback {
        None => tape.concat(&[x_in, x_in]),
        Some(f) => {
            let (a, b) = (tape.shape(f), tape.shape(x_in));
            if a != b {
                return Err(Error::Wiring(format!(
                    "backward skip at level {level}: feedback {a} vs input {b}"
                )));
            }
            tape.concat(&[f, x_in])
        }
    }
}

/// Fused prediction: sigmoid of the sum of all stage logits, equally weighted.
pub fn fuse_stage_outputs<T: Scalar>(tape: &mut Tape<T>, logits: &[Var]) -> Result<Var> {
    let sum = tape.sum_all(logits)?;
    Ok(tape.sigmoid(sum))
}

/// Applies `k` for passes `1..=passes`, threading the state; zero passes
/// return `x` unchanged.
pub fn progressive_unroll<S>(x: S, passes: usize, mut k: impl FnMut(usize, S) -> Result<S>) -> Result<S> {
    let mut state = x;
    for i in 1..=passes {
        state = k(i, state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn first_pass_duplicates_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(1, 2, 2, 2), |[_, c, y, x]| {
            (c * 4 + y * 2 + x) as f64
        }));
        let mut ctx = StepContext::new(1, 1, 2, 0);
        ctx.x_in[1] = Some(x);
        let f = fuse_backward_skip(&mut tape, &ctx, 1).unwrap();
        let v = tape.value(f);
        assert_eq!(v.shape().channels, 4);
        assert_eq!(&v.data()[..8], &v.data()[8..]);
    }

    #[test]
    fn later_pass_requires_feedback() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let mut ctx = StepContext::new(1, 2, 1, 0);
        ctx.x_in[1] = Some(x);
        assert!(matches!(fuse_backward_skip(&mut tape, &ctx, 1), Err(Error::Wiring(_))));
    }

    #[test]
    fn later_stage_duplicates_below_previous_depth() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let mut ctx = StepContext::new(2, 1, 5, 4);
        ctx.x_in[5] = Some(x);
        assert!(fuse_backward_skip(&mut tape, &ctx, 5).is_ok());
        ctx.x_in[4] = Some(x);
        assert!(fuse_backward_skip(&mut tape, &ctx, 4).is_err());
    }

    #[test]
    fn forward_skip_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(matches!(fuse_forward_skip(&mut tape, a, b), Err(Error::Wiring(_))));
    }

    #[test]
    fn zero_passes_is_identity() {
        let out = progressive_unroll(7, 0, |_, s: i32| Ok(s + 1)).unwrap();
        assert_eq!(out, 7);
        let out = progressive_unroll(7, 3, |_, s: i32| Ok(s * 2)).unwrap();
        assert_eq!(out, 56);
    }
}
