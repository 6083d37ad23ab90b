//! Run configuration: flat `key = value` files with command-line overrides.
//!
//! Later sources win: built-in defaults, then the config file, then flags.
//! The seed additionally falls back to `PLNET_SEED` when neither the file nor
//! a flag sets it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plnet_core::arch::{NetworkConfig, Variant};
use plnet_core::train::{AugmentConfig, TrainConfig};
use thiserror::Error;

pub const SEED_ENV: &str = "PLNET_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error(transparent)]
    Invalid(#[from] plnet_core::Error),
}

/// Every accepted key with its default and a one-line description. The
/// network defaults shown are PL-Net's; `variant = unet` swaps in the U-Net
/// values for keys the user leaves unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("variant", "plnet", "architecture: plnet or unet"),
    ("input_size", "224", "square input resolution; images are resized to it"),
    ("base_channels", "32", "channels of the first level before scaling"),
    ("ocs", "1.0", "output channel scale applied to every level"),
    ("steps", "2", "encoder-decoder passes per stage"),
    ("stage_depths", "4,5", "depth of each stage, comma separated"),
    ("learning_rate", "1e-4", "Adam step size"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator epsilon"),
    ("batch_size", "16", "samples per optimizer step"),
    ("epochs", "200", "epoch budget over both training phases"),
    (
        "stage1_epochs",
        "auto",
        "stage-1 phase cap; auto is a quarter of epochs",
    ),
    ("patience", "20", "early-stopping patience in epochs"),
    ("min_delta", "1e-4", "smallest validation-loss drop counted as progress"),
    ("epl", "true", "two-phase training (stage 1 first, then joint)"),
    ("dice_smooth", "1.0", "smoothing term of the soft Dice loss"),
    ("fused_loss", "false", "add a Dice term on the fused output"),
    ("augment", "true", "random rotation, shift and flips during training"),
    (
        "bn_momentum",
        "0.99",
        "weight kept on the old batch-norm running statistics",
    ),
    (
        "bn_scope",
        "use",
        "running statistics per program op (use) or per layer (node)",
    ),
    ("rotation_degrees", "25", "maximum absolute rotation"),
    ("shift_fraction", "0.15", "maximum shift as a fraction of the size"),
    ("horizontal_flip", "true", "allow left-right flips"),
    ("vertical_flip", "true", "allow up-down flips"),
    ("augment_probability", "0.5", "chance that a sample is augmented"),
    ("data", "", "dataset directory with images/ and masks/"),
    ("split", "", "split plan file; empty derives one from folds and seed"),
    ("folds", "5", "number of cross-validation folds"),
    ("fold", "0", "fold held out for validation"),
    ("out", "runs/plnet", "output directory"),
    ("seed", "0", "seed for initialization, splits and augmentation"),
    ("threads", "0", "worker threads; 0 uses all cores"),
];

const NETWORK_KEYS: &[&str] = &["variant", "input_size", "base_channels", "ocs", "steps", "stage_depths"];

/// Raw `key = value` pairs, checked against [`KEYS`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignments {
    values: BTreeMap<String, String>,
}

impl Assignments {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut out = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
            })?;
            let k = k.trim();
            if out.values.contains_key(k) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            out.set(k, v.trim())?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &Assignments) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    fn parse_as<V: FromStr>(&self, key: &str) -> Result<Option<V>, ConfigError>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<V>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    fn apply<V: FromStr>(&self, key: &str, dst: &mut V) -> Result<(), ConfigError>
    where
        V::Err: std::fmt::Display,
    {
        if let Some(v) = self.parse_as(key)? {
            *dst = v;
        }
        Ok(())
    }

    fn depths(&self) -> Result<Option<Vec<usize>>, ConfigError> {
        let Some(v) = self.get("stage_depths") else {
            return Ok(None);
        };
        v.split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|e| ConfigError::Value {
                key: "stage_depths".into(),
                value: v.to_string(),
                reason: e.to_string(),
            })
    }

    /// Applies the network keys to `base`. The variant, when set, replaces
    /// `base` with that variant's defaults first.
    pub fn network_over(&self, base: &NetworkConfig) -> Result<NetworkConfig, ConfigError> {
        let mut net = match self.parse_as::<Variant>("variant")? {
            Some(v) if v != base.variant => NetworkConfig::for_variant(v),
            _ => base.clone(),
        };
        self.apply("input_size", &mut net.input_size)?;
        self.apply("base_channels", &mut net.base_channels)?;
        self.apply("ocs", &mut net.ocs)?;
        self.apply("steps", &mut net.steps)?;
        if let Some(d) = self.depths()? {
            net.stage_depths = d;
        }
        Ok(net)
    }

    pub fn sets_network(&self) -> bool {
        NETWORK_KEYS.iter().any(|k| self.contains(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub folds: usize,
    pub fold: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(&Assignments::default(), None).expect("defaults are valid")
    }
}

fn path_opt(v: Option<&str>) -> Option<PathBuf> {
    v.filter(|s| !s.is_empty()).map(PathBuf::from)
}

impl RunConfig {
    /// Builds the config from assignments; `env_seed` is used only when no
    /// assignment sets the seed.
    pub fn resolve(a: &Assignments, env_seed: Option<&str>) -> Result<Self, ConfigError> {
        let network = a.network_over(&NetworkConfig::plnet())?;

        let seed = match (a.parse_as::<u64>("seed")?, env_seed) {
            (Some(s), _) => s,
            (None, Some(e)) => e
                .trim()
                .parse()
                .map_err(|err: std::num::ParseIntError| ConfigError::Value {
                    key: SEED_ENV.into(),
                    value: e.to_string(),
                    reason: err.to_string(),
                })?,
            (None, None) => 0,
        };

        let mut train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        a.apply("learning_rate", &mut train.learning_rate)?;
        a.apply("adam_beta1", &mut train.adam_beta1)?;
        a.apply("adam_beta2", &mut train.adam_beta2)?;
        a.apply("adam_eps", &mut train.adam_eps)?;
        a.apply("batch_size", &mut train.batch_size)?;
        a.apply("epochs", &mut train.max_epochs)?;
        match a.get("stage1_epochs") {
            None | Some("auto") => {}
            Some(_) => train.stage1_epochs = a.parse_as("stage1_epochs")?,
        }
        a.apply("patience", &mut train.early_stop_patience)?;
        a.apply("min_delta", &mut train.min_delta)?;
        a.apply("epl", &mut train.epl_enabled)?;
        a.apply("dice_smooth", &mut train.dice_smooth)?;
        a.apply("fused_loss", &mut train.fused_loss)?;
        a.apply("augment", &mut train.augment)?;
        a.apply("bn_momentum", &mut train.bn_momentum)?;
        a.apply("bn_scope", &mut train.bn_scope)?;

        let mut augment = AugmentConfig::default();
        a.apply("rotation_degrees", &mut augment.rotation_degrees)?;
        a.apply("shift_fraction", &mut augment.shift_fraction)?;
        a.apply("horizontal_flip", &mut augment.horizontal_flip)?;
        a.apply("vertical_flip", &mut augment.vertical_flip)?;
        a.apply("augment_probability", &mut augment.probability)?;

        let mut cfg = RunConfig {
            network,
            train,
            augment,
            data: path_opt(a.get("data")),
            split: path_opt(a.get("split")),
            folds: 5,
            fold: 0,
            out: PathBuf::from("runs/plnet"),
            seed,
            threads: 0,
        };
        a.apply("folds", &mut cfg.folds)?;
        a.apply("fold", &mut cfg.fold)?;
        if let Some(o) = path_opt(a.get("out")) {
            cfg.out = o;
        }
        a.apply("threads", &mut cfg.threads)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.folds < 2 {
            return Err(value_err("folds", self.folds, "need at least 2 folds"));
        }
        if self.fold >= self.folds {
            return Err(value_err("fold", self.fold, "must be below folds"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in [`KEYS`] order. Parsing the
    /// echo gives back the same config.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let g = &self.augment;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let depths: Vec<String> = n.stage_depths.iter().map(|d| d.to_string()).collect();
        let values: Vec<(&str, String)> = vec![
            ("variant", n.variant.to_string()),
            ("input_size", n.input_size.to_string()),
            ("base_channels", n.base_channels.to_string()),
            ("ocs", fmt_f64(n.ocs)),
            ("steps", n.steps.to_string()),
            ("stage_depths", depths.join(",")),
            ("learning_rate", fmt_f64(t.learning_rate)),
            ("adam_beta1", fmt_f64(t.adam_beta1)),
            ("adam_beta2", fmt_f64(t.adam_beta2)),
            ("adam_eps", fmt_f64(t.adam_eps)),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.max_epochs.to_string()),
            (
                "stage1_epochs",
                t.stage1_epochs.map_or("auto".into(), |e| e.to_string()),
            ),
            ("patience", t.early_stop_patience.to_string()),
            ("min_delta", fmt_f64(t.min_delta)),
            ("epl", t.epl_enabled.to_string()),
            ("dice_smooth", fmt_f64(t.dice_smooth)),
            ("fused_loss", t.fused_loss.to_string()),
            ("augment", t.augment.to_string()),
            ("bn_momentum", fmt_f64(t.bn_momentum)),
            ("bn_scope", t.bn_scope.to_string()),
            ("rotation_degrees", fmt_f64(g.rotation_degrees)),
            ("shift_fraction", fmt_f64(g.shift_fraction)),
            ("horizontal_flip", g.horizontal_flip.to_string()),
            ("vertical_flip", g.vertical_flip.to_string()),
            ("augment_probability", fmt_f64(g.probability)),
            ("data", path(&self.data)),
            ("split", path(&self.split)),
            ("folds", self.folds.to_string()),
            ("fold", self.fold.to_string()),
            ("out", self.out.display().to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut s = String::new();
        for (k, v) in values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn value_err(key: &str, value: impl ToString, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// The documented keys as a commented config file.
pub fn reference_config() -> String {
    let mut s = String::new();
    for (k, d, doc) in KEYS {
        let _ = writeln!(s, "# {doc}\n{k} = {d}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_core() {
        let c = RunConfig::default();
        assert_eq!(c.network, NetworkConfig::plnet());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.augment, AugmentConfig::default());
    }

    #[test]
    fn reference_config_resolves_to_defaults() {
        let a = Assignments::parse(&reference_config(), "ref").unwrap();
        assert_eq!(RunConfig::resolve(&a, None).unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut a = Assignments::default();
        a.set("ocs", "0.3").unwrap();
        a.set("stage_depths", "3, 4").unwrap();
        a.set("learning_rate", "0.001").unwrap();
        a.set("stage1_epochs", "3").unwrap();
        a.set("data", "somewhere").unwrap();
        let c = RunConfig::resolve(&a, None).unwrap();
        let back = RunConfig::resolve(&Assignments::parse(&c.to_text(), "echo").unwrap(), None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(
            Assignments::parse("ocs = 1\nocz = 2", "x"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            Assignments::parse("ocs = 1\nocs = 2", "x"),
            Err(ConfigError::Duplicate(_))
        ));
        assert!(matches!(
            Assignments::parse("ocs 1", "x"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn unet_variant_takes_its_own_defaults() {
        let a = Assignments::parse("variant = unet", "x").unwrap();
        assert_eq!(RunConfig::resolve(&a, None).unwrap().network, NetworkConfig::unet());
    }

    #[test]
    fn seed_precedence() {
        let a = Assignments::default();
        assert_eq!(RunConfig::resolve(&a, Some("9")).unwrap().seed, 9);
        let a = Assignments::parse("seed = 4", "x").unwrap();
        assert_eq!(RunConfig::resolve(&a, Some("9")).unwrap().seed, 4);
        assert!(RunConfig::resolve(&Assignments::default(), Some("nine")).is_err());
    }
}
