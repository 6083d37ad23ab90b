//! Brute-force scalar implementations checked against the library: the Dice
//! loss, stage fusion, pass unrolling and the backward skip.

use plnet_core::arch::NetworkConfig;
use plnet_core::model::{
    fuse_backward_skip, fuse_logits, fuse_stage_outputs, progressive_unroll, Model, PredictMode, StepContext,
};
use plnet_core::nn::{kernels, OpKind, Tape};
use plnet_core::train::dice_loss;
use plnet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_shape(r: &mut ChaCha8Rng) -> Shape {
    Shape::new(
        r.gen_range(1..4),
        r.gen_range(1..3),
        r.gen_range(1..9),
        r.gen_range(1..9),
    )
}

fn dice_by_loop(p: &[f64], g: &[f64], smooth: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..p.len() {
        inter += p[i] * g[i];
        sp += p[i];
        sg += g[i];
    }
    1.0 - (2.0 * inter + smooth) / (sp + sg + smooth)
}

#[test]
fn dice_loss_matches_scalar_loop() {
    let mut r = rng(1);
    for case in 0..200 {
        let shape = random_shape(&mut r);
        let p = Tensor::<f64>::from_fn(shape, |_| r.gen_range(0.0..1.0));
        // at least one foreground pixel so the unsmoothed ratio is defined
        let mut g = Tensor::<f64>::from_fn(shape, |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
        g.data_mut()[0] = 1.0;
        for smooth in [0.0, 1.0] {
            let want = dice_by_loop(p.data(), g.data(), smooth);
            let got = dice_loss(&p, &g, smooth).unwrap();
            assert!((got - want).abs() <= 1e-6, "case {case}: {got} vs {want}");

            let mut tape = Tape::new();
            let pv = tape.leaf(p.clone());
            let l = tape.dice_loss(pv, &g, smooth).unwrap();
            assert!((tape.value(l).item() - want).abs() <= 1e-6);

            let got32 = dice_loss(&p.cast::<f32>(), &g.cast::<f32>(), smooth as f32).unwrap();
            assert!(
                (got32 as f64 - want).abs() <= 1e-6,
                "f32 case {case}: {got32} vs {want}"
            );
        }
    }
}

#[test]
fn dice_loss_of_identical_binary_masks_is_zero() {
    let mut r = rng(2);
    let g = Tensor::<f64>::from_fn(Shape::new(2, 1, 6, 6), |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    assert!(dice_loss(&g, &g, 0.0).unwrap().abs() < 1e-15);
}

fn sigmoid_of_sum_by_loop(logits: &[Tensor<f64>]) -> Vec<f64> {
    let n = logits[0].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for l in logits {
            s += l.data()[i];
        }
        out.push(1.0 / (1.0 + (-s).exp()));
    }
    out
}

#[test]
fn fusion_matches_elementwise_loop() {
    let mut r = rng(3);
    for case in 0..100 {
        let shape = random_shape(&mut r);
        let stages = r.gen_range(1..4);
        let logits: Vec<Tensor<f64>> = (0..stages)
            .map(|_| Tensor::from_fn(shape, |_| r.gen_range(-8.0..8.0)))
            .collect();
        let want = sigmoid_of_sum_by_loop(&logits);

        let plain = fuse_logits(&logits).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<_> = logits.iter().map(|l| tape.leaf(l.clone())).collect();
        let fused = fuse_stage_outputs(&mut tape, &vars).unwrap();
        for (i, &w) in want.iter().enumerate() {
            assert!((plain.data()[i] - w).abs() <= 1e-6, "case {case}");
            assert!((tape.value(fused).data()[i] - w).abs() <= 1e-6, "case {case}");
        }
    }
}

#[test]
fn fusion_of_opposite_logits_is_one_half() {
    let a = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 0.3);
    let b = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), -0.3);
    assert_eq!(fuse_logits(&[a, b]).unwrap().item(), 0.5);
}

#[test]
fn zero_passes_return_the_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(Shape::new(1, 2, 3, 3), |[_, c, y, x]| {
        (c * 9 + y * 3 + x) as f64
    }));
    let before = tape.len();
    let mut calls = 0;
    let out = progressive_unroll(x, 0, |_, v| {
        calls += 1;
        Ok(tape.relu(v))
    })
    .unwrap();
    assert_eq!(out, x);
    assert_eq!(calls, 0);
    assert_eq!(tape.len(), before);
}

#[test]
fn unrolling_composes_the_step() {
    let k = |i: usize, s: f64| Ok(2.0 * s + i as f64);
    assert_eq!(progressive_unroll(1.0, 1, k).unwrap(), 3.0);
    assert_eq!(progressive_unroll(1.0, 2, k).unwrap(), 8.0);
    assert_eq!(progressive_unroll(1.0, 3, k).unwrap(), 19.0);
}

/// Channel block `[from, from + c)` of every sample.
fn channels(t: &Tensor<f64>, from: usize, c: usize) -> Vec<f64> {
    let s = t.shape();
    let mut v = Vec::new();
    for n in 0..s.batch {
        for ch in from..from + c {
            v.extend_from_slice(t.channel_plane(n, ch));
        }
    }
    v
}

#[test]
fn first_pass_backward_skip_duplicates_exactly() {
    let mut r = rng(4);
    let depth = 3;
    let mut tape = Tape::<f64>::new();
    let mut ctx = StepContext::new(1, 1, depth, 0);
    let mut inputs = Vec::new();
    for level in 1..=depth {
        let size = 16 >> (level - 1);
        let t = Tensor::from_fn(Shape::new(3, 2 * level, size, size), |_| r.gen_range(-1.0..1.0));
        ctx.x_in[level] = Some(tape.leaf(t.clone()));
        inputs.push(t);
    }
    for level in 1..=depth {
        let f = fuse_backward_skip(&mut tape, &ctx, level).unwrap();
        let v = tape.value(f);
        let c = 2 * level;
        assert_eq!(v.shape(), inputs[level - 1].shape().with_channels(2 * c));
        let (a, b) = (channels(v, 0, c), channels(v, c, c));
        assert_eq!(a, b);
        assert_eq!(a, channels(&inputs[level - 1], 0, c));
    }
}

#[test]
fn later_passes_put_feedback_first() {
    let mut tape = Tape::<f64>::new();
    let x = Tensor::<f64>::full(Shape::new(2, 3, 4, 4), 1.0);
    let fb = Tensor::<f64>::full(Shape::new(2, 3, 4, 4), -2.0);
    let mut ctx = StepContext::new(1, 2, 1, 0);
    ctx.x_in[1] = Some(tape.leaf(x));
    ctx.prior_pass[1] = Some(tape.leaf(fb));
    let f = fuse_backward_skip(&mut tape, &ctx, 1).unwrap();
    let v = tape.value(f);
    assert!(channels(v, 0, 3).iter().all(|&e| e == -2.0));
    assert!(channels(v, 3, 3).iter().all(|&e| e == 1.0));

    // stage 2, first pass: the previous stage's feature where it exists,
    // duplication below the previous stage's depth
    let mut ctx = StepContext::new(2, 1, 2, 1);
    ctx.x_in[1] = ctx_leaf(&mut tape, 1.0, 4);
    ctx.x_in[2] = ctx_leaf(&mut tape, 3.0, 2);
    ctx.prior_stage[1] = ctx_leaf(&mut tape, 5.0, 4);
    let top = fuse_backward_skip(&mut tape, &ctx, 1).unwrap();
    assert_eq!(channels(tape.value(top), 0, 3), vec![5.0; 2 * 3 * 16]);
    let deep = fuse_backward_skip(&mut tape, &ctx, 2).unwrap();
    assert!(tape.value(deep).data().iter().all(|&e| e == 3.0));
}

fn ctx_leaf(tape: &mut Tape<f64>, v: f64, size: usize) -> Option<plnet_core::nn::Var> {
    Some(tape.leaf(Tensor::full(Shape::new(2, 3, size, size), v)))
}

#[test]
fn predict_applies_one_sigmoid_to_the_summed_logits() {
    let cfg = NetworkConfig::plnet()
        .with_ocs(0.125)
        .with_input_size(16)
        .with_depths(&[2, 3]);
    let mut model = Model::<f64>::new(&cfg, 11).unwrap();
    let mut r = rng(5);
    let image = Tensor::<f64>::from_fn(Shape::new(2, 3, 16, 16), |_| r.gen_range(0.0..1.0));

    let p = model.predict(&image, PredictMode::Fused).unwrap();
    assert_eq!(p.trace.iter().filter(|&&k| k == OpKind::Sigmoid).count(), 1);
    let outs = model.stage_outputs(&image).unwrap();
    assert_eq!(outs.logits.len(), 2);
    let want = sigmoid_of_sum_by_loop(&outs.logits);
    for (i, &w) in want.iter().enumerate() {
        assert!((p.prob.data()[i] - w).abs() <= 1e-6);
    }
    assert_eq!(p.prob.shape(), Shape::new(2, 1, 16, 16));

    let last = model.predict(&image, PredictMode::FinalStage).unwrap();
    assert_eq!(last.trace.iter().filter(|&&k| k == OpKind::Sigmoid).count(), 1);
    let s2 = kernels::sigmoid(&outs.logits[1]);
    for (a, b) in last.prob.data().iter().zip(s2.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}
