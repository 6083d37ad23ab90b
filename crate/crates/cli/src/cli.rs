use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use plnet_core::arch::Variant;

use crate::commands::{self, CONFIG_ECHO};
use crate::config::{reference_config, Assignments, RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "plnet",
    version,
    about = "Progressive-learning U-Net for binary segmentation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; they override config-file keys.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Flat `key = value` config file (see `plnet config`)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output channel scale
    #[arg(long, global = true)]
    pub ocs: Option<f64>,
    /// Encoder-decoder passes per stage
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Train the joint loss from the start (no stage-1 phase)
    #[arg(long, global = true)]
    pub no_epl: bool,
    /// Falls back to PLNET_SEED, then to the config file
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset directory with images/ and masks/
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Worker threads; 0 uses all cores
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Any config key, repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the parameter breakdown of the configured network
    Params,
    /// Train and write best/last checkpoints, history and the resolved config
    Train,
    /// Score a checkpoint on the dataset (or the held-out fold of --set split=...)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write probability and mask images for one image
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Generate a synthetic ellipse dataset
    Synth {
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// 0 gives clean images, larger values add clutter and noise
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
    },
    /// Write a k-fold split plan for a dataset
    Split {
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Print every config key with its default
    Config,
}

impl CommonArgs {
    /// The flags as config assignments.
    pub fn assignments(&self) -> Result<Assignments> {
        let mut a = Assignments::default();
        let mut put = |k: &str, v: Option<String>| -> Result<()> {
            if let Some(v) = v {
                a.set(k, v)?;
            }
            Ok(())
        };
        put("ocs", self.ocs.map(|v| v.to_string()))?;
        put("steps", self.steps.map(|v| v.to_string()))?;
        put("variant", self.variant.map(|v| v.to_string()))?;
        put("epl", self.no_epl.then(|| "false".into()))?;
        put("seed", self.seed.map(|v| v.to_string()))?;
        put("data", self.data.as_ref().map(|p| p.display().to_string()))?;
        put("out", self.out.as_ref().map(|p| p.display().to_string()))?;
        put("epochs", self.epochs.map(|v| v.to_string()))?;
        put("threads", self.threads.map(|v| v.to_string()))?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            a.set(k.trim(), v.trim())?;
        }
        Ok(a)
    }

    /// Config file overlaid with the flags, plus the resolved config.
    pub fn resolve(&self) -> Result<(Assignments, RunConfig)> {
        let mut a = match &self.config {
            Some(p) => Assignments::load(p)?,
            None => Assignments::default(),
        };
        a.merge(&self.assignments()?);
        let env = std::env::var(SEED_ENV).ok();
        let cfg = RunConfig::resolve(&a, env.as_deref())?;
        Ok((a, cfg))
    }
}

fn init_threads(n: usize) {
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Config = cli.command {
        print!("{}", reference_config());
        return Ok(());
    }
    let (explicit, cfg) = cli.common.resolve()?;
    init_threads(cfg.threads);
    match cli.command {
        Command::Params => {
            let r = commands::cmd_params(&cfg)?;
            print!("{}", commands::format_params(&cfg, &r));
        }
        Command::Train => {
            let s = commands::cmd_train(&cfg)?;
            println!(
                "best epoch {} (val loss {:.4}); outputs and {CONFIG_ECHO} in {}",
                s.best_epoch,
                s.best_val_loss,
                s.out.display()
            );
        }
        Command::Eval { checkpoint } => {
            let r = commands::cmd_eval(&cfg, &explicit, &checkpoint)?;
            print!("{}", r.to_table());
        }
        Command::Predict { checkpoint, image } => {
            let p = commands::cmd_predict(&checkpoint, &explicit, &image, &cfg.out)?;
            log::info!("op trace: {} ops, {} sigmoid", p.trace.len(), p.sigmoid_count());
            println!("{}\n{}", p.prob_path.display(), p.mask_path.display());
        }
        Command::Synth {
            count,
            size,
            difficulty,
        } => {
            let s = commands::cmd_synth(&cfg.out, count, size, cfg.seed, difficulty)?;
            println!("wrote {} samples to {}", s.len(), cfg.out.display());
        }
        Command::Split { folds } => {
            let data = cfg.data.as_ref().context("split needs --data")?;
            let path = cfg.out.join(commands::SPLIT_FILE);
            let plan = commands::cmd_split(data, folds, cfg.seed, &path)?;
            println!(
                "{}-fold plan over {} samples: {}",
                plan.k,
                plan.folds.len(),
                path.display()
            );
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

/// 3 for numeric failures (non-finite values), 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|c| {
        matches!(
            c.downcast_ref::<plnet_core::Error>(),
            Some(plnet_core::Error::NonFinite { .. })
        )
    });
    if numeric {
        3
    } else {
        2
    }
}
