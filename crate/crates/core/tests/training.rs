use plnet_core::arch::NetworkConfig;
use plnet_core::checkpoint::Checkpoint;
use plnet_core::data::{synth_generate, Sample};
use plnet_core::model::Model;
use plnet_core::nn::ParamStore;
use plnet_core::train::{train_epl, AugmentConfig, EpochRecord, NoObserver, Phase, TrainConfig, TrainObserver};
use plnet_core::Error;

fn tiny() -> NetworkConfig {
    NetworkConfig::plnet()
        .with_ocs(0.125)
        .with_input_size(16)
        .with_depths(&[2, 3])
}

fn data() -> (Vec<Sample>, Vec<Sample>) {
    let all = synth_generate(12, 16, 4, 1.0).unwrap();
    let (train, val) = all.split_at(8);
    (train.to_vec(), val.to_vec())
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: epochs,
        stage1_epochs: Some(2),
        seed: 9,
        bn_momentum: 0.9,
        ..Default::default()
    }
}

#[derive(Default)]
struct Snapshots {
    phases: Vec<(Phase, ParamStore<f32>)>,
    records: Vec<EpochRecord>,
}

impl TrainObserver<f32> for Snapshots {
    fn on_epoch(&mut self, r: &EpochRecord) {
        self.records.push(r.clone());
    }

    fn on_phase_end(&mut self, phase: Phase, model: &Model<f32>) {
        self.phases.push((phase, model.params().clone()));
    }
}

fn changed(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Vec<usize> {
    (0..a.len()).filter(|&i| a.get(i) != b.get(i)).collect()
}

#[test]
fn phase_a_trains_exactly_the_stage_one_parameters() {
    let (train, val) = data();
    let model = Model::<f32>::new(&tiny(), 1).unwrap();
    let initial = model.params().clone();
    let stage1 = model.stage_params(1);
    let mut obs = Snapshots::default();
    let cfg = TrainConfig {
        // no early exit from phase A with the initial weights as best
        min_delta: 0.0,
        ..cfg(4)
    };
    let out = train_epl(model, &train, &val, &cfg, &AugmentConfig::default(), &mut obs).unwrap();

    assert_eq!(obs.phases.len(), 2);
    let (pa, after_a) = &obs.phases[0];
    assert_eq!(*pa, Phase::Stage1);
    let moved = changed(&initial, after_a);
    for i in 0..initial.len() {
        if !stage1.contains(&i) {
            assert_eq!(initial.get(i), after_a.get(i), "{} moved in phase A", initial.name(i));
        }
    }
    assert_eq!(moved, stage1, "every stage-1 tensor is trained in phase A");

    let (pb, after_b) = &obs.phases[1];
    assert_eq!(*pb, Phase::Joint);
    let moved_b = changed(after_a, after_b);
    for i in &stage1 {
        assert!(moved_b.contains(i), "{} frozen in phase B", initial.name(*i));
    }
    assert_eq!(moved_b.len(), initial.len(), "phase B trains everything");

    let phase_a: Vec<_> = obs.records.iter().filter(|r| r.phase == Phase::Stage1).collect();
    assert_eq!(phase_a.len(), 2);
    assert!(phase_a.iter().all(|r| r.inactive_grad_norm == 0.0));
    assert!(phase_a.iter().all(|r| r.stage_losses.len() == 1));
    let joint: Vec<_> = obs.records.iter().filter(|r| r.phase == Phase::Joint).collect();
    assert_eq!(joint.len(), 2);
    assert!(joint.iter().all(|r| r.stage_losses.len() == 2));
    assert_eq!(out.final_phase, Phase::Joint);
    assert_eq!(out.history.epochs.len(), 4);
}

#[test]
fn without_epl_one_joint_phase_trains_everything() {
    let (train, val) = data();
    let model = Model::<f32>::new(&tiny(), 1).unwrap();
    let initial = model.params().clone();
    let mut obs = Snapshots::default();
    let cfg = TrainConfig {
        epl_enabled: false,
        ..cfg(2)
    };
    let out = train_epl(model, &train, &val, &cfg, &AugmentConfig::default(), &mut obs).unwrap();
    assert_eq!(obs.phases.len(), 1);
    assert_eq!(obs.phases[0].0, Phase::Joint);
    assert!(out.history.epochs.iter().all(|r| r.phase == Phase::Joint));
    assert_eq!(changed(&initial, &out.last.params().clone()).len(), initial.len());
}

#[test]
fn same_seed_same_run() {
    let (train, val) = data();
    let run = || {
        let model = Model::<f32>::new(&tiny(), 5).unwrap();
        train_epl(model, &train, &val, &cfg(3), &AugmentConfig::default(), &mut NoObserver).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history.epochs.len(), b.history.epochs.len());
    for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
        let rel = |p: f64, q: f64| (p - q).abs() / q.abs().max(1e-12);
        assert!(rel(x.train_loss, y.train_loss) <= 1e-6);
        assert!(rel(x.val_loss, y.val_loss) <= 1e-6);
        assert_eq!(x.val_dice, y.val_dice);
    }
    let bytes = |m: &Model<f32>| Checkpoint::from_model(m, None, None).to_bytes();
    assert_eq!(bytes(&a.best), bytes(&b.best));
    assert_eq!(bytes(&a.last), bytes(&b.last));

    // another seed takes another path
    let model = Model::<f32>::new(&tiny(), 5).unwrap();
    let other = TrainConfig { seed: 10, ..cfg(3) };
    let c = train_epl(model, &train, &val, &other, &AugmentConfig::default(), &mut NoObserver).unwrap();
    assert_ne!(bytes(&c.last), bytes(&a.last));
}

#[test]
fn bad_splits_are_rejected() {
    let (train, val) = data();
    let model = || Model::<f32>::new(&tiny(), 0).unwrap();
    let aug = AugmentConfig::default();
    assert!(matches!(
        train_epl(model(), &[], &val, &cfg(2), &aug, &mut NoObserver),
        Err(Error::Data(_))
    ));
    let overlap = vec![train[0].clone()];
    assert!(matches!(
        train_epl(model(), &train, &overlap, &cfg(2), &aug, &mut NoObserver),
        Err(Error::Data(_))
    ));
}

#[test]
fn divergence_is_reported_with_the_epoch() {
    let (train, val) = data();
    let model = Model::<f32>::new(&tiny(), 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        epl_enabled: false,
        ..cfg(3)
    };
    match train_epl(model, &train, &val, &cfg, &AugmentConfig::default(), &mut NoObserver) {
        Err(Error::NonFinite { context }) => assert!(context.contains("epoch"), "{context}"),
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.best_epoch)),
    }
}
