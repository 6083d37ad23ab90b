use std::collections::BTreeSet;

use plnet_core::arch::NetworkConfig;
use plnet_core::checkpoint::Checkpoint;
use plnet_core::data::{gray_world_normalize, kfold_split};
use plnet_core::metrics::{confusion, evaluate, Confusion};
use plnet_core::model::Model;
use plnet_core::nn::{kernels, Mode, Tape};
use plnet_core::train::dice_loss;
use plnet_core::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn filled(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

fn binary(shape: Shape, seed: u64, p: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if r.gen_bool(p) { 1.0 } else { 0.0 })
}

fn lincomb(a: f64, x: &Tensor<f64>, b: f64, y: &Tensor<f64>) -> Tensor<f64> {
    x.zip_map(y, |u, v| a * u + b * v)
}

fn assert_close(x: &Tensor<f64>, y: &Tensor<f64>, tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(x.shape(), y.shape());
    for (u, v) in x.data().iter().zip(y.data()) {
        prop_assert!((u - v).abs() <= tol * (1.0 + v.abs()), "{} vs {}", u, v);
    }
    Ok(())
}

fn small_shape() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..4, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_without_bias(
        s in small_shape(), out in 1usize..4, k in prop::sample::select(vec![1usize, 3]),
        a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>(),
    ) {
        let x = filled(s, seed, -1.0, 1.0);
        let y = filled(s, seed ^ 1, -1.0, 1.0);
        let w = filled(Shape::new(out, s.channels, k, k), seed ^ 2, -1.0, 1.0);
        let zero = Tensor::zeros(Shape::vector(out));
        let conv = |t: &Tensor<f64>| kernels::conv2d_forward(t, &w, &zero).unwrap();
        let lhs = conv(&lincomb(a, &x, b, &y));
        assert_close(&lhs, &lincomb(a, &conv(&x), b, &conv(&y)), 1e-6)?;
    }

    #[test]
    fn upsample_and_concat_are_linear(
        s in small_shape(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>(),
    ) {
        let x = filled(s, seed, -1.0, 1.0);
        let y = filled(s, seed ^ 1, -1.0, 1.0);
        let up = kernels::upsample2::<f64>;
        assert_close(&up(&lincomb(a, &x, b, &y)), &lincomb(a, &up(&x), b, &up(&y)), 1e-6)?;

        let x2 = filled(s, seed ^ 2, -1.0, 1.0);
        let y2 = filled(s, seed ^ 3, -1.0, 1.0);
        let cat = |p: &Tensor<f64>, q: &Tensor<f64>| kernels::concat_channels(&[p, q]).unwrap();
        let lhs = cat(&lincomb(a, &x, b, &y), &lincomb(a, &x2, b, &y2));
        assert_close(&lhs, &lincomb(a, &cat(&x, &x2), b, &cat(&y, &y2)), 1e-6)?;
    }

    #[test]
    fn forward_ops_are_deterministic(s in small_shape(), seed in any::<u64>()) {
        let x = filled(s, seed, -1.0, 1.0);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(x.clone());
            let r = tape.relu(v);
            let u = tape.upsample2(r);
            let y = tape.sigmoid(u);
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn dice_loss_is_symmetric_on_binary_masks(s in small_shape(), seed in any::<u64>(), smooth in 0.0f64..2.0) {
        let p = binary(s, seed, 0.4);
        let g = binary(s, seed ^ 7, 0.4);
        let l1 = dice_loss(&p, &g, smooth).unwrap();
        let l2 = dice_loss(&g, &p, smooth).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_stays_in_unit_range(s in small_shape(), seed in any::<u64>(), smooth in 0.0f64..2.0) {
        let p = filled(s, seed, 0.0, 1.0);
        let mut g = binary(s, seed ^ 7, 0.5);
        g.data_mut()[0] = 1.0;
        let l = dice_loss(&p, &g, smooth).unwrap();
        prop_assert!((0.0..=1.0).contains(&l), "{}", l);
    }

    #[test]
    fn metric_identities(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let m = evaluate(&Confusion { tp, fp, fn_, tn });
        for v in m.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.dice >= m.iou);
        if tp + fp + fn_ > 0 {
            prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
            let boundary = m.iou == 0.0 || m.iou == 1.0;
            prop_assert_eq!(m.dice == m.iou, boundary);
        }
    }

    #[test]
    fn gray_world_is_idempotent_without_clipping(
        h in 1usize..9, w in 1usize..9, gains in prop::array::uniform3(0.8f64..1.2), seed in any::<u64>(),
    ) {
        // channel gains within 0.8..1.2 and values under 0.4 keep every
        // rescaled value below 1, so nothing clips
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn(Shape::new(1, 3, h, w), |[_, c, _, _]| {
            (r.gen_range(0.05..0.4) * gains[c]) as f32
        });
        let once = gray_world_normalize(&img);
        let twice = gray_world_normalize(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn kfold_partitions_the_ids(n in 2usize..80, k in 2usize..11, seed in any::<u64>(), rot in 0usize..80) {
        prop_assume!(k <= n);
        let ids: Vec<String> = (0..n).map(|i| format!("id{i:03}")).collect();
        let plan = kfold_split(&ids, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        let mut sizes = Vec::new();
        for f in 0..k {
            let fold = plan.fold(f);
            sizes.push(fold.len());
            for id in fold {
                prop_assert!(seen.insert(id), "id in two folds");
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            let (train, val) = plan.train_val(f);
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert!(train.iter().all(|t| !val.contains(t)));
        }
        // depends on the id set, not its order
        let mut rotated = ids.clone();
        rotated.rotate_left(rot % n);
        prop_assert_eq!(kfold_split(&rotated, k, seed).unwrap(), plan);
    }
}

/// Straight per-pixel count over flat masks.
fn brute_confusion(p: &[f64], g: &[f64]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..p.len() {
        if p[i] == 1.0 && g[i] == 1.0 {
            tp += 1;
        } else if p[i] == 1.0 {
            fp += 1;
        } else if g[i] == 1.0 {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

#[test]
fn evaluate_matches_brute_force_on_random_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000u64 {
        let shape = Shape::new(1, 1, r.gen_range(1..16), r.gen_range(1..16));
        let density = r.gen_range(0.0..1.0);
        let p = binary(shape, case, density);
        let g = binary(shape, case + 5000, density);
        let (tp, fp, fn_, tn) = brute_confusion(p.data(), g.data());
        let c = confusion(&p, &g).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn), "case {case}");
        let m = evaluate(&c);
        let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        assert_eq!(m.acc, ratio(tp + tn, tp + fp + fn_ + tn));
        assert_eq!(m.iou, ratio(tp, tp + fp + fn_));
        assert_eq!(m.dice, ratio(2 * tp, 2 * tp + fp + fn_));
        assert_eq!(m.sens, ratio(tp, tp + fn_));
        assert_eq!(m.spec, ratio(tn, tn + fp));
    }
}

fn tiny_config(ocs: f64, steps: usize, deep: bool) -> NetworkConfig {
    let depths: &[usize] = if deep { &[2, 3] } else { &[2] };
    NetworkConfig::plnet()
        .with_ocs(ocs)
        .with_steps(steps)
        .with_input_size(16)
        .with_depths(depths)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        ocs in prop::sample::select(vec![0.125, 0.25]), steps in 1usize..3, deep in any::<bool>(), seed in any::<u64>(),
    ) {
        let cfg = tiny_config(ocs, steps, deep);
        let mut model = Model::<f32>::new(&cfg, seed).unwrap();
        // populate running statistics with something other than their defaults
        let x = filled(Shape::new(2, 3, 16, 16), seed, 0.0, 1.0).cast::<f32>();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        model.forward(&mut tape, xv, Mode::Train, cfg.stages()).unwrap();

        let ck = Checkpoint::from_model(&model, None, None);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        let rebuilt = back.model::<f32>().unwrap();
        prop_assert_eq!(Checkpoint::from_model(&rebuilt, None, None).to_bytes(), bytes);
    }
}

#[test]
fn checkpoint_file_save_load_save() {
    let cfg = tiny_config(0.25, 2, true);
    let model = Model::<f32>::new(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    Checkpoint::from_model(&model, None, None).save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
