//! Run configuration: one TOML file with a flat key/value table per module.
//!
//! Unknown keys are rejected so that a typo cannot silently fall back to a
//! default. Individual values can be overridden with `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSettings;
use crate::datagen::{MixtureSpec, SplitFractions};
use crate::diffusion::{default_beta_bounds, DenoiserSettings, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};

/// Which ablation of the training loop to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Real data only, cross-entropy loss.
    CeBaseline,
    /// One synthetic batch with uniform class shares, generated before training.
    Offline,
    /// Fresh synthetic batch every epoch, uniform class shares.
    OisUniform,
    /// Fresh synthetic batch every epoch, shares from per-class accuracy.
    OisAas,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::CeBaseline,
        RunMode::Offline,
        RunMode::OisUniform,
        RunMode::OisAas,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::CeBaseline => "ce_baseline",
            RunMode::Offline => "offline",
            RunMode::OisUniform => "ois_uniform",
            RunMode::OisAas => "ois_aas",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn needs_denoiser(self) -> bool {
        self != RunMode::CeBaseline
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    pub n_max: usize,
    pub imbalance_ratio: f64,
    /// Explicit class sizes; leave empty to use the geometric decay formula.
    pub class_counts: Vec<usize>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = MixtureSpec::default();
        let split = SplitFractions::default();
        Self {
            means: spec.means,
            stds: spec.stds,
            n_max: spec.n_max,
            imbalance_ratio: spec.imbalance_ratio,
            class_counts: spec.class_counts.unwrap_or_default(),
            train_fraction: split.train,
            val_fraction: split.val,
            test_fraction: split.test,
        }
    }
}

impl DataConfig {
    pub fn mixture(&self) -> MixtureSpec {
        MixtureSpec {
            means: self.means.clone(),
            stds: self.stds.clone(),
            n_max: self.n_max,
            imbalance_ratio: self.imbalance_ratio,
            class_counts: (!self.class_counts.is_empty()).then(|| self.class_counts.clone()),
        }
    }

    pub fn split(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_fraction,
            val: self.val_fraction,
            test: self.test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    /// Defaults to `1e-4 * 1000 / steps` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    /// Defaults to `0.02 * 1000 / steps` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: None,
            beta_end: None,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let (start, end) = default_beta_bounds(self.steps.max(1));
        NoiseSchedule::linear(
            self.steps,
            self.beta_start.unwrap_or(start),
            self.beta_end.unwrap_or(end),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub mode: RunMode,
    pub seed: u64,
    /// Synthetic samples per epoch; when absent, `synthetic_fraction * |real train|`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_budget: Option<usize>,
    pub synthetic_fraction: f64,
    /// Extra epochs trained on real data before the first synthesis.
    pub warmup_epochs: usize,
    /// Write every synthetic batch as `synthetic_epoch<N>.csv`.
    pub dump_synthetic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::OisAas,
            seed: 0,
            synthetic_budget: None,
            synthetic_fraction: 0.2,
            warmup_epochs: 0,
            dump_synthetic: false,
            output_dir: None,
        }
    }
}

impl LoopConfig {
    pub fn budget(&self, real_train: usize) -> usize {
        self.synthetic_budget
            .unwrap_or_else(|| (self.synthetic_fraction * real_train as f64).round() as usize)
    }
}

/// Complete, serializable description of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserSettings,
    pub classifier: ClassifierSettings,
    pub guidance: GuidanceConfig,
    pub run: LoopConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.mixture().validate()?;
        let split = self.data.split();
        if !(split.train > 0.0 && split.val > 0.0 && split.test > 0.0)
            || (split.train + split.val + split.test - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("data split fractions must be positive and sum to 1".into()));
        }
        self.diffusion.schedule()?;
        self.denoiser.validate()?;
        self.classifier.validate()?;
        self.guidance.validate()?;
        if !(self.run.synthetic_fraction >= 0.0 && self.run.synthetic_fraction.is_finite()) {
            return Err(Error::Config("run.synthetic_fraction must be >= 0".into()));
        }
        Ok(())
    }

    /// Apply `section.key=value` overrides. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml_string())
            .map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (section, key) = path.trim().split_once('.').ok_or_else(|| {
                Error::Config(format!("override key `{path}` must look like section.key"))
            })?;
            let value = parse_value(raw.trim());
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(key.to_string(), value);
                }
                _ => return Err(Error::Config(format!("`{section}` is not a section"))),
            }
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
