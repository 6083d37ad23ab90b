//! Subcommand implementations. Each returns structured results; printing is
//! left to the caller.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plnet_core::arch::{count_parameters, ComputeGraph, ParamReport};
use plnet_core::checkpoint::Checkpoint;
use plnet_core::data::{
    gray_world_normalize, kfold_split, load_dataset, preprocess, read_rgb_png, synth_generate, write_dataset,
    write_gray_png, Sample, SplitPlan,
};
use plnet_core::metrics::{binarize, confusion, evaluate, FoldRecord, MetricsReport, SampleRecord};
use plnet_core::model::{mask_to_gray8, probability_to_gray8, Model, PredictMode};
use plnet_core::nn::{kernels, OpKind};
use plnet_core::train::{train_epl, EpochRecord, Phase, TrainHistory, TrainObserver};
use plnet_core::Tensor;
use rayon::prelude::*;

use crate::config::{Assignments, RunConfig};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_ECHO: &str = "config.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const REPORT_FILE: &str = "report.jsonl";

pub fn cmd_params(cfg: &RunConfig) -> Result<ParamReport> {
    let graph = ComputeGraph::build(&cfg.network)?;
    Ok(count_parameters(&graph))
}

pub fn format_params(cfg: &RunConfig, r: &ParamReport) -> String {
    let n = &cfg.network;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} ocs={} steps={} depths={:?} input={}",
        n.variant, n.ocs, n.steps, n.stage_depths, n.input_size
    );
    let _ = writeln!(s, "\nper level:");
    for (level, c) in &r.by_level {
        let name = if *level == 0 {
            "head".to_string()
        } else {
            format!("L{level}")
        };
        let _ = writeln!(s, "  {name:<8} {c:>12}");
    }
    let _ = writeln!(s, "per module:");
    for (m, c) in &r.by_module {
        let _ = writeln!(s, "  {:<12} {c:>12}", format!("{m:?}").to_lowercase());
    }
    let _ = writeln!(s, "per step:");
    for (k, c) in &r.by_step {
        let _ = writeln!(s, "  {k:<8} {c:>12}");
    }
    let _ = writeln!(s, "per stage set:");
    for (k, c) in &r.by_stages {
        let _ = writeln!(s, "  {k:<14} {c:>12}");
    }
    let _ = writeln!(
        s,
        "\ntotal {} ({:.2} M), {:.1} MB at 4 bytes per parameter",
        r.total,
        r.total as f64 / 1e6,
        r.size_mb()
    );
    s
}

fn load_preprocessed(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let ds = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if !ds.unmatched.is_empty() {
        log::warn!("{} files without a counterpart were skipped", ds.unmatched.len());
    }
    Ok(ds
        .samples
        .par_iter()
        .map(|s| preprocess(s, size))
        .collect::<plnet_core::Result<Vec<_>>>()?)
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    match &cfg.data {
        Some(d) => Ok(d),
        None => bail!("no dataset given (set `data` or pass --data)"),
    }
}

fn split_plan(cfg: &RunConfig, samples: &[Sample]) -> Result<SplitPlan> {
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let plan = match &cfg.split {
        Some(p) => SplitPlan::load(p).with_context(|| format!("reading split plan {}", p.display()))?,
        None => kfold_split(&ids, cfg.folds, cfg.seed)?,
    };
    if let Some(id) = ids.iter().find(|id| !plan.folds.contains_key(**id)) {
        bail!("sample {id} is not in the split plan");
    }
    if cfg.fold >= plan.k {
        bail!("fold {} out of range for a {}-fold plan", cfg.fold, plan.k);
    }
    Ok(plan)
}

fn select(samples: &[Sample], ids: &[String]) -> Vec<Sample> {
    samples.iter().filter(|s| ids.contains(&s.id)).cloned().collect()
}

struct LogObserver {
    last_epoch: usize,
}

impl TrainObserver<f32> for LogObserver {
    fn on_epoch(&mut self, r: &EpochRecord) {
        self.last_epoch = r.epoch;
        log::info!(
            "epoch {:>3} {:<6} train {:.4} val {:.4} dice {:.4} iou {:.4} ({:.1}s)",
            r.epoch,
            r.phase,
            r.train_loss,
            r.val_loss,
            r.val_dice,
            r.val_iou,
            r.seconds
        );
    }

    fn on_phase_end(&mut self, phase: Phase, _model: &Model<f32>) {
        log::info!("{phase} phase finished after epoch {}", self.last_epoch);
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: TrainHistory,
}

/// Trains on every fold but `cfg.fold` and writes the best and last
/// checkpoints, the history, the split plan and the resolved config.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let samples = load_preprocessed(data_dir(cfg)?, cfg.network.input_size)?;
    let plan = split_plan(cfg, &samples)?;
    let (train_ids, val_ids) = plan.train_val(cfg.fold);
    let (train, val) = (select(&samples, &train_ids), select(&samples, &val_ids));
    log::info!(
        "{} training and {} validation samples (fold {})",
        train.len(),
        val.len(),
        cfg.fold
    );

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(CONFIG_ECHO), cfg.to_text())?;
    plan.save(&cfg.out.join(SPLIT_FILE))?;

    let model = Model::<f32>::new(&cfg.network, cfg.seed)?;
    let mut obs = LogObserver { last_epoch: 0 };
    let outcome = train_epl(model, &train, &val, &cfg.train, &cfg.augment, &mut obs)
        .with_context(|| format!("training failed after epoch {}", obs.last_epoch))?;

    let best_phase = outcome
        .history
        .epochs
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map(|r| r.phase);
    let mut best = Checkpoint::from_model(&outcome.best, None, best_phase);
    best.meta.insert("epoch".into(), outcome.best_epoch.to_string());
    best.meta.insert("seed".into(), cfg.seed.to_string());
    best.save(&cfg.out.join(BEST_CHECKPOINT))?;

    let mut last = Checkpoint::from_model(&outcome.last, Some(&outcome.optimizer), Some(outcome.final_phase));
    let last_epoch = outcome.history.last().map_or(0, |r| r.epoch);
    last.meta.insert("epoch".into(), last_epoch.to_string());
    last.meta.insert("seed".into(), cfg.seed.to_string());
    last.save(&cfg.out.join(LAST_CHECKPOINT))?;

    outcome.history.save(&cfg.out.join(HISTORY_FILE))?;
    Ok(TrainSummary {
        out: cfg.out.clone(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        history: outcome.history,
    })
}

/// Loads a checkpoint, refusing it when `explicit` sets network keys that
/// disagree with the stored architecture.
pub fn load_model(path: &Path, explicit: &Assignments) -> Result<Model<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if explicit.sets_network() {
        let want = explicit.network_over(&ck.config)?;
        if want != ck.config {
            bail!(
                "checkpoint {} was trained with {:?}, the configuration asks for {:?}",
                path.display(),
                ck.config,
                want
            );
        }
    }
    Ok(ck.model()?)
}

/// Scores fused predictions, thresholded at 0.5. With a split plan only the
/// held-out fold is evaluated, otherwise the whole dataset.
pub fn cmd_eval(cfg: &RunConfig, explicit: &Assignments, checkpoint: &Path) -> Result<MetricsReport> {
    let mut model = load_model(checkpoint, explicit)?;
    let mut samples = load_preprocessed(data_dir(cfg)?, model.config().input_size)?;
    let fold = if cfg.split.is_some() {
        let plan = split_plan(cfg, &samples)?;
        samples = select(&samples, &plan.fold(cfg.fold));
        cfg.fold
    } else {
        0
    };
    let records = samples
        .iter()
        .map(|s| {
            let p = model.predict(&s.image, PredictMode::Fused)?;
            let c = confusion(&binarize(&p.prob), &s.mask)?;
            Ok(SampleRecord {
                id: s.id.clone(),
                confusion: c,
                metrics: evaluate(&c),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::new(vec![FoldRecord::new(fold, records)?])?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(REPORT_FILE), report.to_json_lines())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    /// Fused probabilities at the image's original resolution.
    pub prob: Tensor<f32>,
    pub trace: Vec<OpKind>,
    pub prob_path: PathBuf,
    pub mask_path: PathBuf,
}

impl PredictOutput {
    pub fn sigmoid_count(&self) -> usize {
        self.trace.iter().filter(|k| **k == OpKind::Sigmoid).count()
    }
}

/// Writes `<stem>_prob.png` and `<stem>_mask.png` into `out`.
pub fn cmd_predict(checkpoint: &Path, explicit: &Assignments, image: &Path, out: &Path) -> Result<PredictOutput> {
    let mut model = load_model(checkpoint, explicit)?;
    let raw = read_rgb_png(image).with_context(|| format!("reading image {}", image.display()))?;
    let s = raw.shape();
    let size = model.config().input_size;
    let input = kernels::bilinear_resize(&gray_world_normalize(&raw), size, size).map(|v| v.clamp(0.0, 1.0));
    let pred = model.predict(&input, PredictMode::Fused)?;
    let prob = kernels::bilinear_resize(&pred.prob, s.height, s.width).map(|v| v.clamp(0.0, 1.0));

    fs::create_dir_all(out)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    let prob_path = out.join(format!("{stem}_prob.png"));
    let mask_path = out.join(format!("{stem}_mask.png"));
    write_gray_png(&prob_path, s.width, s.height, probability_to_gray8(&prob, 0))?;
    write_gray_png(&mask_path, s.width, s.height, mask_to_gray8(&prob, 0))?;
    Ok(PredictOutput {
        prob,
        trace: pred.trace,
        prob_path,
        mask_path,
    })
}

pub fn cmd_synth(out: &Path, count: usize, size: usize, seed: u64, difficulty: f64) -> Result<Vec<Sample>> {
    let samples = synth_generate(count, size, seed, difficulty)?;
    write_dataset(out, &samples).with_context(|| format!("writing dataset to {}", out.display()))?;
    Ok(samples)
}

pub fn cmd_split(data: &Path, folds: usize, seed: u64, out: &Path) -> Result<SplitPlan> {
    let ds = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
    let plan = kfold_split(&ids, folds, seed)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    plan.save(out)?;
    Ok(plan)
}
