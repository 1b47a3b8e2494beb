//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Which pipeline blocks a model uses. `afg = false` means a pooled
/// backbone feature feeds a linear head directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub afg: bool,
    pub fgg: bool,
    pub mefl: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        afg: true,
        fgg: true,
        mefl: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.afg && (self.fgg || self.mefl) {
            return Err(Error::Config(
                "use_fgg and use_mefl require use_afg".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

/// Every hyperparameter of both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_aus: usize,
    pub channels: usize,
    pub spatial: usize,
    pub backbone_hidden: usize,
    pub k_neighbors: usize,
    pub gcn_layers: usize,
    pub lambda: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_aus: 6,
            channels: 16,
            spatial: 8,
            backbone_hidden: 32,
            k_neighbors: 3,
            gcn_layers: 2,
            lambda: 0.05,
            stage1_epochs: 20,
            stage2_epochs: 20,
            stage1_lr: 1e-4,
            stage2_lr: 1e-6,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            threshold: 0.5,
            seed: 0,
            variant: Variant::FULL,
        }
    }
}

pub const KEYS: &[&str] = &[
    "n_aus",
    "channels",
    "spatial",
    "backbone_hidden",
    "k_neighbors",
    "gcn_layers",
    "lambda",
    "stage1_epochs",
    "stage2_epochs",
    "stage1_lr",
    "stage2_lr",
    "batch_size",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "threshold",
    "seed",
    "use_afg",
    "use_fgg",
    "use_mefl",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "n_aus" => self.n_aus = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "spatial" => self.spatial = parse(key, value)?,
            "backbone_hidden" => self.backbone_hidden = parse(key, value)?,
            "k_neighbors" => self.k_neighbors = parse(key, value)?,
            "gcn_layers" => self.gcn_layers = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, value)?,
            "stage1_lr" => self.stage1_lr = parse(key, value)?,
            "stage2_lr" => self.stage2_lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "use_afg" => self.variant.afg = parse(key, value)?,
            "use_fgg" => self.variant.fgg = parse(key, value)?,
            "use_mefl" => self.variant.mefl = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n_aus" => self.n_aus.to_string(),
            "channels" => self.channels.to_string(),
            "spatial" => self.spatial.to_string(),
            "backbone_hidden" => self.backbone_hidden.to_string(),
            "k_neighbors" => self.k_neighbors.to_string(),
            "gcn_layers" => self.gcn_layers.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "stage1_epochs" => self.stage1_epochs.to_string(),
            "stage2_epochs" => self.stage2_epochs.to_string(),
            "stage1_lr" => format!("{:?}", self.stage1_lr),
            "stage2_lr" => format!("{:?}", self.stage2_lr),
            "batch_size" => self.batch_size.to_string(),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "threshold" => format!("{:?}", self.threshold),
            "seed" => self.seed.to_string(),
            "use_afg" => self.variant.afg.to_string(),
            "use_fgg" => self.variant.fgg.to_string(),
            "use_mefl" => self.variant.mefl.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then overrides.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_text(&std::fs::read_to_string(path)?)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.n_aus < 2 {
            return fail(format!("n_aus must be at least 2, got {}", self.n_aus));
        }
        if self.channels == 0 || self.spatial == 0 || self.backbone_hidden == 0 {
            return fail("channels, spatial and backbone_hidden must be positive".into());
        }
        if self.k_neighbors < 1 || self.k_neighbors > self.n_aus - 1 {
            return fail(format!(
                "k_neighbors must lie in [1, {}], got {}",
                self.n_aus - 1,
                self.k_neighbors
            ));
        }
        if self.gcn_layers == 0 {
            return fail("gcn_layers must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.stage1_lr >= 0.0 && self.stage2_lr >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail("threshold must lie in [0, 1]".into());
        }
        Ok(())
    }
}
