//! Run configuration: JSON file, then flags, then defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use fusionnet_core::data::DEFAULT_CLASSES;
use fusionnet_core::models::{Scale, Variant};
use serde::{Deserialize, Serialize};

use crate::Usage;

pub const SEED_ENV: &str = "FUSIONNET_SEED";
pub const CONFIG_FILE: &str = "config.json";

/// An explicit seed, else `FUSIONNET_SEED`, else 0.
pub fn seed_or_env(seed: Option<u64>) -> Result<u64, Usage> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic three-class data: `n_per_class` training samples per class,
    /// a quarter of that for validation and half for testing.
    Synth { n_per_class: usize },
    /// `root/<class>/*.png`, split by the default ratios.
    Dir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub scale: Scale,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub augment: bool,
    pub classes: Vec<String>,
    pub data: DataSource,
    pub out: PathBuf,
}

/// Every field optional; used both for `--config` files and for flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub variant: Option<Variant>,
    pub scale: Option<Scale>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
    pub classes: Option<Vec<String>>,
    pub data: Option<DataSource>,
    pub out: Option<PathBuf>,
}

impl PartialConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<PartialConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    /// Fields set in `over` win.
    pub fn overlay(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            variant: over.variant.or(self.variant),
            scale: over.scale.or(self.scale),
            epochs: over.epochs.or(self.epochs),
            batch_size: over.batch_size.or(self.batch_size),
            lr: over.lr.or(self.lr),
            dropout: over.dropout.or(self.dropout),
            seed: over.seed.or(self.seed),
            augment: over.augment.or(self.augment),
            classes: over.classes.or(self.classes),
            data: over.data.or(self.data),
            out: over.out.or(self.out),
        }
    }

    /// Fills defaults. The seed falls back to `FUSIONNET_SEED`, then 0.
    pub fn resolve(self) -> anyhow::Result<RunConfig> {
        let scale = self.scale.unwrap_or(Scale::Toy);
        let seed = seed_or_env(self.seed)?;
        let cfg = RunConfig {
            variant: self.variant.unwrap_or(Variant::M4),
            scale,
            epochs: self.epochs.unwrap_or(match scale {
                Scale::Toy => 30,
                Scale::Full => 100,
            }),
            batch_size: self.batch_size.unwrap_or(32),
            lr: self.lr.unwrap_or(0.001),
            dropout: self.dropout.unwrap_or(0.3),
            seed,
            augment: self.augment.unwrap_or(false),
            classes: self
                .classes
                .unwrap_or_else(|| DEFAULT_CLASSES.map(String::from).to_vec()),
            data: self
                .data
                .ok_or_else(|| Usage("no data source: pass --synth N or --data DIR".into()))?,
            out: self
                .out
                .ok_or_else(|| Usage("no output directory: pass --out DIR".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Usage> {
        if self.epochs < 1 {
            return Err(Usage("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Usage("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Usage(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Usage(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.classes.len() < 2 {
            return Err(Usage("at least two classes are needed".into()));
        }
        if let DataSource::Synth { n_per_class } = self.data {
            if n_per_class < 2 {
                return Err(Usage("--synth needs at least 2 samples per class".into()));
            }
            if self.classes.len() != 3 {
                return Err(Usage("synthetic data has exactly three classes".into()));
            }
        }
        Ok(())
    }

    pub fn load(run_dir: &Path) -> anyhow::Result<RunConfig> {
        let path = run_dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
    }
}
