//! Run configuration: a TOML file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_design::DEFAULT_COND_THRESHOLD;
use crate::nn::{AdamConfig, TileConfig};
use crate::phantom::PhantomSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Targets synthesised from the subject's own data.
    #[default]
    Selfsup,
    /// Raw data in, clean (or all-data synthesis) target out.
    Supervised,
}

/// Input from files. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dwi: PathBuf,
    pub bvals: PathBuf,
    pub bvecs: PathBuf,
    pub mask: Option<PathBuf>,
    /// Multiplies every b-value; 1e-3 for tables in s/mm².
    #[serde(default = "one")]
    pub bval_scale: f64,
    /// Optional clean reference with the same layout as `dwi`, for evaluation.
    pub reference: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

/// A synthetic subject. The acquisition uses the designed direction scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub seed: u64,
    /// Rician noise level; unset means a b=0 SNR of 30.
    pub sigma: Option<f64>,
    pub n_b0: usize,
    /// ms/μm²
    pub bval: f64,
    pub spec: PhantomSpec,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { shape: [32, 32, 32], seed: 0, sigma: None, n_b0: 3, bval: 1.0, spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub subsets: usize,
    pub rotation_trials: usize,
    pub selection_trials: usize,
    pub cond_threshold: f64,
    /// Existing plan JSON; skips design/selection.
    pub plan: Option<PathBuf>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { subsets: 3, rotation_trials: 2000, selection_trials: 20_000, cond_threshold: DEFAULT_COND_THRESHOLD, plan: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub kernel: usize,
    /// Pretrained weights to fine-tune from.
    pub init: Option<PathBuf>,
    /// Trained weights to use as is (with training disabled).
    pub load: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 192, kernel: 3, init: None, load: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub enabled: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub block: [usize; 3],
    pub n_blocks: usize,
    pub min_coverage: f64,
    pub flip: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            enabled: true,
            epochs: 40,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 1,
            val_fraction: 0.2,
            block: [64, 64, 64],
            n_blocks: 8,
            min_coverage: crate::pipeline::DEFAULT_MIN_COVERAGE,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub data: Option<DataConfig>,
    pub phantom: Option<PhantomConfig>,
    pub design: DesignConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub infer: TileConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Selfsup,
            output_dir: PathBuf::from("sdndti-out"),
            data: None,
            phantom: None,
            design: DesignConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            infer: TileConfig::default(),
        }
    }
}

/// Parses an override's right-hand side as a TOML value, falling back to a
/// plain string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value`, creating intermediate tables as needed.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text with overrides; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = base_dir {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides, path.parent())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(d) = &mut self.data {
            fix(&mut d.dwi);
            fix(&mut d.bvals);
            fix(&mut d.bvecs);
            d.mask.as_mut().map(fix);
            d.reference.as_mut().map(fix);
        }
        self.design.plan.as_mut().map(fix);
        self.model.init.as_mut().map(fix);
        self.model.load.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.is_some() == self.phantom.is_some() {
            return bad("exactly one of [data] and [phantom] must be given".into());
        }
        if self.design.subsets == 0 {
            return bad("design.subsets must be at least 1".into());
        }
        if self.model.width == 0 || self.model.kernel % 2 == 0 {
            return bad(format!("model.width {} / model.kernel {} invalid", self.model.width, self.model.kernel));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.n_blocks == 0 || t.block.contains(&0) {
            return bad("train.epochs, batch_size, n_blocks and block must be positive".into());
        }
        if !(t.val_fraction > 0.0 && t.val_fraction < 1.0) {
            return bad(format!("train.val_fraction {} outside (0, 1)", t.val_fraction));
        }
        if !(t.learning_rate > 0.0) {
            return bad(format!("train.learning_rate {}", t.learning_rate));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
        }
    }

    pub fn train_config(&self) -> crate::nn::TrainConfig {
        crate::nn::TrainConfig {
            adam: self.adam(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            val_fraction: self.train.val_fraction,
            seed: crate::rng::derive_seed(self.seed, "train"),
        }
    }
}
