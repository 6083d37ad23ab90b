//! Finite-difference checks at 64 bits: every tape primitive, then the whole
//! tiny two-stage network under the joint Dice loss.

use plnet_core::arch::NetworkConfig;
use plnet_core::model::Model;
use plnet_core::nn::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use plnet_core::nn::{BnConfig, BnRunning, Mode, ParamStore, Tape, Var};
use plnet_core::train::{total_loss, Phase};
use plnet_core::{Result, Shape, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
/// Single primitives are smooth around the probes, so they get a tighter bound.
const TIGHT: f64 = 1e-6;

fn randn(shape: Shape, seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks sit far from every probe.
fn away_from_zero(shape: Shape, seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor64::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values, so max-pool windows never tie.
fn distinct(shape: Shape, seed: u64) -> Tensor64 {
    let mut t = randn(shape, seed);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 1e-2;
    }
    t
}

fn mask(shape: Shape, seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor64::from_fn(shape, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
}

fn store(tensors: Vec<(&str, Tensor64)>) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, t) in tensors {
        p.insert(n, t).unwrap();
    }
    p
}

/// Reduces `y` to a scalar through sigmoid and Dice against a fixed mask, so
/// every output coordinate gets a distinct, non-zero upstream gradient.
fn head(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let g = mask(tape.shape(y), seed);
    let p = tape.sigmoid(y);
    tape.dice_loss(p, &g, 1.0)
}

fn check<F>(mut params: ParamStore<f64>, tol: f64, f: F) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        coords_per_tensor: 24,
        tol,
        ..Default::default()
    };
    let r = grad_check(&mut params, cfg, f).unwrap();
    assert!(r.passed(), "worst {:?}", r.worst());
    r
}

#[test]
fn conv2d_sum_of_output() {
    let p = store(vec![
        ("w", randn(Shape::new(3, 2, 3, 3), 43)),
        ("b", randn(Shape::vector(3), 44)),
    ]);
    let x = randn(Shape::new(1, 2, 5, 5), 45);
    let mut params = p;
    let cfg = GradCheckConfig {
        coords_per_tensor: usize::MAX,
        tol: TIGHT,
        ..Default::default()
    };
    let r = grad_check(&mut params, cfg, |p, t| {
        let xv = t.leaf(x.clone());
        let (w, b) = (t.param(0, p.get(0)), t.param(1, p.get(1)));
        let y = t.conv2d(xv, w, b)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert_eq!(r.checks.len(), 3 * 2 * 9 + 3);
    assert!(r.passed(), "worst {:?}", r.worst());
}

#[test]
fn conv2d_3x3() {
    let p = store(vec![
        ("x", randn(Shape::new(2, 3, 5, 6), 1)),
        ("w", randn(Shape::new(4, 3, 3, 3), 2)),
        ("b", randn(Shape::vector(4), 3)),
    ]);
    check(p, TIGHT, |p, t| {
        let (x, w, b) = (t.param(0, p.get(0)), t.param(1, p.get(1)), t.param(2, p.get(2)));
        let y = t.conv2d(x, w, b)?;
        head(t, y, 4)
    });
}

#[test]
fn conv2d_1x1() {
    let p = store(vec![
        ("x", randn(Shape::new(2, 5, 3, 3), 5)),
        ("w", randn(Shape::new(1, 5, 1, 1), 6)),
        ("b", randn(Shape::vector(1), 7)),
    ]);
    check(p, TIGHT, |p, t| {
        let (x, w, b) = (t.param(0, p.get(0)), t.param(1, p.get(1)), t.param(2, p.get(2)));
        let y = t.conv2d(x, w, b)?;
        head(t, y, 8)
    });
}

#[test]
fn batch_norm_train_mode() {
    let p = store(vec![
        ("x", randn(Shape::new(3, 2, 4, 4), 9)),
        ("gamma", randn(Shape::vector(2), 10)),
        ("beta", randn(Shape::vector(2), 11)),
    ]);
    check(p, 1e-5, |p, t| {
        let (x, g, b) = (t.param(0, p.get(0)), t.param(1, p.get(1)), t.param(2, p.get(2)));
        let mut running = BnRunning::new(2);
        let y = t.batch_norm(x, g, b, &mut running, BnConfig::default(), Mode::Train)?;
        head(t, y, 12)
    });
}

#[test]
fn batch_norm_infer_mode() {
    let p = store(vec![
        ("x", randn(Shape::new(2, 2, 3, 3), 13)),
        ("gamma", randn(Shape::vector(2), 14)),
        ("beta", randn(Shape::vector(2), 15)),
    ]);
    check(p, TIGHT, |p, t| {
        let (x, g, b) = (t.param(0, p.get(0)), t.param(1, p.get(1)), t.param(2, p.get(2)));
        let mut running = BnRunning {
            mean: vec![0.3, -0.2],
            var: vec![0.5, 2.0],
        };
        let y = t.batch_norm(x, g, b, &mut running, BnConfig::default(), Mode::Infer)?;
        head(t, y, 16)
    });
}

#[test]
fn relu() {
    let p = store(vec![("x", away_from_zero(Shape::new(2, 3, 4, 4), 17))]);
    check(p, TIGHT, |p, t| {
        let x = t.param(0, p.get(0));
        let y = t.relu(x);
        head(t, y, 18)
    });
}

#[test]
fn sigmoid() {
    let p = store(vec![("x", randn(Shape::new(1, 2, 5, 5), 19).scale(4.0))]);
    check(p, TIGHT, |p, t| {
        let x = t.param(0, p.get(0));
        let y = t.sigmoid(x);
        let g = mask(t.shape(y), 20);
        t.dice_loss(y, &g, 1.0)
    });
}

#[test]
fn maxpool() {
    let p = store(vec![("x", distinct(Shape::new(2, 2, 6, 4), 21))]);
    check(p, TIGHT, |p, t| {
        let x = t.param(0, p.get(0));
        let y = t.maxpool2(x)?;
        head(t, y, 22)
    });
}

#[test]
fn upsample() {
    let p = store(vec![("x", randn(Shape::new(2, 2, 3, 4), 23))]);
    check(p, TIGHT, |p, t| {
        let x = t.param(0, p.get(0));
        let y = t.upsample2(x);
        head(t, y, 24)
    });
}

#[test]
fn concat_add_scale_sum() {
    let p = store(vec![
        ("a", randn(Shape::new(2, 2, 3, 3), 25)),
        ("b", randn(Shape::new(2, 3, 3, 3), 26)),
        ("c", randn(Shape::new(2, 5, 3, 3), 27)),
    ]);
    check(p, TIGHT, |p, t| {
        let (a, b, c) = (t.param(0, p.get(0)), t.param(1, p.get(1)), t.param(2, p.get(2)));
        let ab = t.concat(&[a, b])?;
        let s = t.add(ab, c)?;
        let s2 = t.scale(s, -0.7);
        let y = t.sum_all(&[s2, c, ab])?;
        head(t, y, 28)
    });
}

#[test]
fn dice_loss_on_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let probs = Tensor64::from_fn(Shape::new(2, 1, 4, 4), |_| rng.gen_range(0.05..0.95));
    let p = store(vec![("p", probs)]);
    for smooth in [0.0, 1.0] {
        check(p.clone(), TIGHT, |p, t| {
            let x = t.param(0, p.get(0));
            let g = mask(t.shape(x), 30);
            t.dice_loss(x, &g, smooth)
        });
    }
}

fn tiny() -> NetworkConfig {
    NetworkConfig::plnet()
        .with_ocs(0.125)
        .with_input_size(32)
        .with_depths(&[3, 4])
}

fn network_check(cfg: &NetworkConfig, phase: Phase) -> GradCheckReport {
    let model = Model::<f64>::new(cfg, 7).unwrap();
    let size = cfg.input_size;
    let x = randn(Shape::new(2, 3, size, size), 31).map(|v| 0.5 + 0.5 * v);
    let g = mask(Shape::new(2, 1, size, size), 32);
    let mut params = model.params().clone();
    // Thousands of ReLU and max-pool kinks sit within 1e-5 of some probe, so
    // the step is small enough to stay on one linear piece. A few ulps of the
    // loss over 2h is ~3e-9, hence the floor: gradients under 1e-4 (conv
    // biases ahead of BN are exactly zero) are held to 1e-8 absolute.
    let gc = GradCheckConfig {
        coords_per_tensor: 3,
        step: 1e-7,
        tol: TOL,
        abs_floor: 1e-4,
        seed: 1,
    };
    let stages = cfg.stages();
    let report = grad_check(&mut params, gc, |p, tape| {
        let mut m = model.clone();
        *m.params_mut() = p.clone();
        let xv = tape.leaf(x.clone());
        let logits = m.forward(tape, xv, Mode::Train, stages)?;
        let probs: Vec<Var> = logits.iter().map(|&l| tape.sigmoid(l)).collect();
        total_loss(tape, phase, &probs, &g, 1.0)
    })
    .unwrap();
    let probed: std::collections::BTreeSet<&str> = report
        .checks
        .iter()
        .map(|c| c.path.split('[').next().unwrap())
        .collect();
    assert_eq!(probed.len(), model.params().len(), "every tensor probed");
    assert!(
        report.passed(),
        "max rel err {:.3e} at {:?}",
        report.max_rel_err(),
        report.worst()
    );
    report
}

#[test]
fn tiny_plnet_joint_dice() {
    let cfg = tiny();
    assert_eq!(cfg.steps, 2);
    network_check(&cfg, Phase::Joint);
}

#[test]
fn plnet_16_stage1_loss() {
    let cfg = NetworkConfig::plnet()
        .with_ocs(0.125)
        .with_input_size(16)
        .with_depths(&[2, 3]);
    let r = network_check(&cfg, Phase::Stage1);
    for c in r.checks.iter().filter(|c| c.path.starts_with("head/stage2")) {
        assert_eq!(c.analytic, 0.0, "{}", c.path);
    }
}

#[test]
fn unet_16_dice() {
    let cfg = NetworkConfig::unet().with_ocs(0.125).with_input_size(16);
    network_check(&cfg, Phase::Stage1);
}

#[test]
fn injected_fault_is_caught() {
    let p = store(vec![
        ("x", randn(Shape::new(1, 2, 4, 4), 33)),
        ("w", randn(Shape::new(2, 2, 3, 3), 34)),
        ("b", randn(Shape::vector(2), 35)),
    ]);
    let mut params = p;
    let r = grad_check(&mut params, GradCheckConfig::default(), |p, t| {
        t.inject_conv_grad_fault(1.01);
        let (x, w, b) = (t.param(0, p.get(0)), t.param(1, p.get(1)), t.param(2, p.get(2)));
        let y = t.conv2d(x, w, b)?;
        head(t, y, 36)
    })
    .unwrap();
    assert!(!r.passed());
    assert!(r.max_rel_err() > 5e-3);
}

#[test]
fn concat_of_one_var_twice() {
    let p = store(vec![("a", randn(Shape::new(2, 2, 3, 3), 37))]);
    check(p, TIGHT, |p, t| {
        let a = t.param(0, p.get(0));
        let y = t.concat(&[a, a])?;
        head(t, y, 38)
    });
}

#[test]
fn param_registered_twice() {
    let p = store(vec![
        ("x", randn(Shape::new(1, 2, 4, 4), 39)),
        ("w", randn(Shape::new(2, 2, 3, 3), 40)),
        ("b", randn(Shape::vector(2), 41)),
    ]);
    check(p, TIGHT, |p, t| {
        let x = t.param(0, p.get(0));
        let (w1, b1) = (t.param(1, p.get(1)), t.param(2, p.get(2)));
        let y = t.conv2d(x, w1, b1)?;
        let (w2, b2) = (t.param(1, p.get(1)), t.param(2, p.get(2)));
        let y = t.conv2d(y, w2, b2)?;
        head(t, y, 42)
    });
}
