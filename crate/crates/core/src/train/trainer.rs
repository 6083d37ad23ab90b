//! Two-phase training loop.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion, evaluate};
use crate::model::{fuse_stage_outputs, Model};
use crate::nn::{BnConfig, Mode, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::augment::augment;
use super::config::{AugmentConfig, TrainConfig};
use super::early_stop::{Decision, EarlyStopping};
use super::history::{EpochRecord, TrainHistory};
use super::loss::{dice_loss, total_loss, Phase};

/// Random stream for one `(seed, epoch, index)` triple, independent of
/// scheduling.
pub fn stream_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(b"plnettrn");
    ChaCha8Rng::from_seed(key)
}

/// Hooks called during training.
pub trait TrainObserver<T> {
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    /// Called after a phase ends and its best weights have been restored.
    fn on_phase_end(&mut self, _phase: Phase, _model: &Model<T>) {}
}

pub struct NoObserver;

impl<T> TrainObserver<T> for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights with the lowest validation loss of the final phase.
    pub best: Model<T>,
    pub last: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_phase: Phase,
}

/// Validation loss and mean per-sample Dice and IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
}

fn batch_tensors<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let imgs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&imgs)?.cast(), Tensor::stack(&masks)?.cast()))
}

fn stages_for(phase: Phase, model_stages: usize) -> usize {
    match phase {
        Phase::Stage1 => 1,
        Phase::Joint => model_stages,
    }
}

/// Scores `model` on `val` in inference mode under the objective of `phase`.
/// Predictions are the first stage's in [`Phase::Stage1`] and the fused
/// output otherwise.
pub fn validate<T: Scalar>(
    model: &mut Model<T>,
    val: &[Sample],
    phase: Phase,
    cfg: &TrainConfig,
) -> Result<Validation> {
    if val.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    let smooth = T::from_f64_lossy(cfg.dice_smooth);
    let stages = stages_for(phase, model.graph().stages());
    let (mut loss_sum, mut dice_sum, mut iou_sum) = (0.0, 0.0, 0.0);
    let refs: Vec<&Sample> = val.iter().collect();
    for chunk in refs.chunks(cfg.batch_size) {
        let (x, g) = batch_tensors::<T>(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let logits = model.forward(&mut tape, xv, Mode::Infer, stages)?;
        let mut probs: Vec<Var> = logits.iter().map(|&l| tape.sigmoid(l)).collect();
        if cfg.fused_loss && phase == Phase::Joint {
            probs.push(fuse_stage_outputs(&mut tape, &logits)?);
        }
        let loss = total_loss(&mut tape, phase, &probs, &g, smooth)?;
        let l = tape.value(loss).item().to_f64_lossy();
        if !l.is_finite() {
            return Err(Error::NonFinite {
                context: "validation loss".into(),
            });
        }
        loss_sum += l * chunk.len() as f64;
        let pred = if stages == 1 {
            tape.value(probs[0]).clone()
        } else {
            let f = fuse_stage_outputs(&mut tape, &logits)?;
            tape.value(f).clone()
        };
        let pred = binarize(&pred);
        for n in 0..chunk.len() {
            let m = evaluate(&confusion(&pred.select(n), &g.select(n))?);
            dice_sum += m.dice;
            iou_sum += m.iou;
        }
    }
    let n = val.len() as f64;
    Ok(Validation {
        loss: loss_sum / n,
        dice: dice_sum / n,
        iou: iou_sum / n,
    })
}

struct PhaseRun<T> {
    best: Model<T>,
    best_val: f64,
    best_epoch: usize,
    optimizer: OptimizerState<T>,
    epochs: usize,
}

struct Ctx<'a, T> {
    train: &'a [Sample],
    val: &'a [Sample],
    cfg: &'a TrainConfig,
    aug: &'a AugmentConfig,
    history: &'a mut TrainHistory,
    observer: &'a mut dyn TrainObserver<T>,
}

fn run_phase<T: Scalar>(
    model: &mut Model<T>,
    phase: Phase,
    first_epoch: usize,
    budget: usize,
    ctx: &mut Ctx<'_, T>,
) -> Result<PhaseRun<T>> {
    let cfg = ctx.cfg;
    let stages = stages_for(phase, model.graph().stages());
    let active: Vec<usize> = match phase {
        Phase::Stage1 => model.stage_params(1),
        Phase::Joint => (0..model.params().len()).collect(),
    };
    let active_set: HashSet<usize> = active.iter().copied().collect();
    let adam = AdamConfig::from(cfg);
    let smooth = T::from_f64_lossy(cfg.dice_smooth);
    let mut opt = OptimizerState::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
    let mut best: Option<(Model<T>, f64, usize)> = None;
    let mut epochs = 0;

    for epoch in first_epoch..first_epoch + budget {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..ctx.train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, u64::MAX));
        let (mut loss_sum, mut stage_sums, mut inactive_sq) = (0.0, vec![0.0; stages], 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let prepared: Vec<Sample> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &ctx.train[i];
                    if !cfg.augment {
                        return s.clone();
                    }
                    let mut rng = stream_rng(cfg.seed, epoch as u64, i as u64);
                    let (image, mask) = augment(&s.image, &s.mask, ctx.aug, &mut rng);
                    Sample {
                        id: s.id.clone(),
                        image,
                        mask,
                    }
                })
                .collect();
            let refs: Vec<&Sample> = prepared.iter().collect();
            let (x, g) = batch_tensors::<T>(&refs)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let logits = model.forward(&mut tape, xv, Mode::Train, stages)?;
            let mut probs: Vec<Var> = logits.iter().map(|&l| tape.sigmoid(l)).collect();
            for (s, &p) in probs.iter().enumerate() {
                stage_sums[s] += dice_loss(tape.value(p), &g, smooth)?.to_f64_lossy() * chunk.len() as f64;
            }
            if cfg.fused_loss && phase == Phase::Joint {
                probs.push(fuse_stage_outputs(&mut tape, &logits)?);
            }
            let loss = total_loss(&mut tape, phase, &probs, &g, smooth)?;
            let l = tape.value(loss).item().to_f64_lossy();
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("epoch {epoch} batch {b}: training loss"),
                });
            }
            loss_sum += l * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let pg = tape.param_grads(&grads);
            for (i, gt) in &pg {
                if !active_set.contains(i) {
                    inactive_sq += gt.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
                }
            }
            adam_step(model.params_mut(), &pg, &mut opt, adam, &active).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("epoch {epoch} batch {b}: {context}"),
                },
                other => other,
            })?;
        }
        let v = validate(model, ctx.val, phase, cfg)?;
        let n = ctx.train.len() as f64;
        let rec = EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / n,
            stage_losses: stage_sums.iter().map(|s| s / n).collect(),
            val_loss: v.loss,
            val_dice: v.dice,
            val_iou: v.iou,
            inactive_grad_norm: inactive_sq.sqrt(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} [{phase}] train {:.4} val {:.4} dice {:.4} iou {:.4} ({:.1}s)",
            rec.train_loss,
            rec.val_loss,
            rec.val_dice,
            rec.val_iou,
            rec.seconds
        );
        ctx.observer.on_epoch(&rec);
        ctx.history.push(rec)?;
        epochs += 1;
        if best.as_ref().is_none_or(|(_, b, _)| v.loss < *b) {
            best = Some((model.clone(), v.loss, epoch));
        }
        if stopper.update(v.loss) == Decision::Stop {
            log::info!("early stop in phase {phase} after epoch {epoch}");
            break;
        }
    }
    let (best, best_val, best_epoch) = best.ok_or_else(|| Error::config("phase ran no epochs"))?;
    Ok(PhaseRun {
        best,
        best_val,
        best_epoch,
        optimizer: opt,
        epochs,
    })
}

/// Trains with external progressive learning.
///
/// With `epl_enabled`, the first phase trains only the parameters the
/// stage-1 head depends on, under the stage-1 loss, for at most
/// [`TrainConfig::stage1_budget`] epochs. Its best weights are restored and
/// the second phase trains every parameter under the joint loss with a fresh
/// optimizer for the rest of the budget. Without it, a single joint phase
/// runs from scratch. Both phases stop early on the validation loss.
///
/// The model's batch-norm momentum and statistics scope are set from `cfg`
/// first; changing the scope resets the running statistics.
pub fn train_epl<T: Scalar>(
    mut model: Model<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    aug.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let train_ids: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::Data(format!("sample {} is in both splits", s.id)));
    }
    let size = model.config().input_size;
    if let Some(s) = train.iter().chain(val).find(|s| s.size() != (size, size)) {
        return Err(Error::Data(format!(
            "sample {} is {:?}, model expects {size}x{size}",
            s.id,
            s.size()
        )));
    }

    let mut history = TrainHistory::default();
    let mut ctx = Ctx {
        train,
        val,
        cfg,
        aug,
        history: &mut history,
        observer,
    };
    if model.bn_scope() != cfg.bn_scope {
        model.set_bn_scope(cfg.bn_scope);
    }
    model.set_bn_config(BnConfig {
        momentum: cfg.bn_momentum,
        ..model.bn_config()
    });
    let two_phase = cfg.epl_enabled && model.graph().stages() > 1;
    let mut next_epoch = 1;
    let mut final_run = None;
    let mut remaining = cfg.max_epochs;
    if two_phase {
        let run = run_phase(&mut model, Phase::Stage1, next_epoch, cfg.stage1_budget(), &mut ctx)?;
        next_epoch += run.epochs;
        remaining -= run.epochs;
        model = run.best.clone();
        ctx.observer.on_phase_end(Phase::Stage1, &model);
        final_run = Some((run, Phase::Stage1, model.clone()));
    }
    if remaining > 0 {
        let run = run_phase(&mut model, Phase::Joint, next_epoch, remaining, &mut ctx)?;
        let last = model.clone();
        model = run.best.clone();
        ctx.observer.on_phase_end(Phase::Joint, &model);
        final_run = Some((run, Phase::Joint, last));
    }
    let (run, final_phase, last) = final_run.expect("at least one phase runs");
    Ok(TrainOutcome {
        best: run.best,
        last,
        optimizer: run.optimizer,
        history,
        best_epoch: run.best_epoch,
        best_val_loss: run.best_val,
        final_phase,
    })
}
