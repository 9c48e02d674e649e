//! Experiment configuration read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::arch::{presets, ArchError, ArchSpec};
use crate::data::SynthSpec;
use crate::gates::{ImportanceConfig, Regularizer};
use crate::optim::AdamParams;
use crate::search::SearchConfig;
use crate::train::TrainSchedule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Arch(#[from] ArchError),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synth,
    Cifar10(PathBuf),
}

impl FromStr for DatasetSource {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "synth" => Ok(Self::Synth),
            Some(("cifar10", path)) if !path.is_empty() => Ok(Self::Cifar10(path.into())),
            _ => Err(ConfigError::Invalid(format!("dataset {s:?} is neither `synth` nor `cifar10:<path>`"))),
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synth => f.write_str("synth"),
            Self::Cifar10(p) => write!(f, "cifar10:{}", p.display()),
        }
    }
}

impl Serialize for DatasetSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DatasetSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Gate-learning settings; the target sparsity comes from the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSettings {
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub regularizer: Regularizer,
    pub snapshots_per_epoch: usize,
}

impl Default for GateSettings {
    fn default() -> Self {
        // desk scale: smaller batches so that ten epochs give the gates
        // enough steps on a few thousand images
        Self { batch_size: 32, ..Self::from(&ImportanceConfig::default()) }
    }
}

impl From<&ImportanceConfig> for GateSettings {
    fn from(c: &ImportanceConfig) -> Self {
        Self {
            gamma: c.gamma,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            adam: c.adam,
            regularizer: c.regularizer,
            snapshots_per_epoch: c.snapshots_per_epoch,
        }
    }
}

impl GateSettings {
    pub fn importance(&self, target_sparsity: f64) -> ImportanceConfig {
        ImportanceConfig {
            gamma: self.gamma,
            target_sparsity,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            adam: self.adam,
            regularizer: self.regularizer,
            snapshots_per_epoch: self.snapshots_per_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub max_iters: usize,
    pub tolerance: f64,
    /// Treat a non-converged search as a failed run.
    pub require_convergence: bool,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            max_iters: SearchConfig::DEFAULT_MAX_ITERS,
            tolerance: SearchConfig::DEFAULT_TOLERANCE,
            require_convergence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Preset name, ignored when `arch_file` is set.
    pub arch: String,
    pub arch_file: Option<PathBuf>,
    pub expand: f64,
    /// Target FLOPS as a fraction of the expanded full model.
    pub budget: f64,
    /// Gate sparsity target; defaults to `budget`.
    pub sparsity_r: Option<f64>,
    pub gates: GateSettings,
    pub search: SearchSettings,
    pub train: TrainSchedule,
    /// Scale training epochs by full/pruned FLOPS.
    pub budget_training: bool,
    pub lottery_init: bool,
    pub dataset: DatasetSource,
    pub synth: SynthSpec,
    /// Validation images per class; defaults to 50 for synthetic data and
    /// 500 for CIFAR-10.
    pub val_per_class: Option<usize>,
    /// Seeds the synthetic data and the validation split.
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    /// Pre-training checkpoints for `study` and `train-baseline`.
    pub checkpoint_epochs: Vec<usize>,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            arch: "vgg-small".into(),
            arch_file: None,
            expand: 1.25,
            budget: 0.5,
            sparsity_r: None,
            gates: GateSettings::default(),
            search: SearchSettings::default(),
            train: TrainSchedule::default(),
            budget_training: true,
            lottery_init: false,
            dataset: DatasetSource::Synth,
            synth: SynthSpec::default(),
            val_per_class: None,
            data_seed: 0,
            seeds: vec![0],
            checkpoint_epochs: vec![10],
            out: PathBuf::from("runs"),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(ConfigError::Invalid(format!("budget ratio {} outside (0, 1]", self.budget)));
        }
        if let Some(r) = self.sparsity_r.filter(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(ConfigError::Invalid(format!("sparsity target {r} outside (0, 1]")));
        }
        if !(self.expand > 0.0 && self.expand.is_finite()) {
            return Err(ConfigError::Invalid(format!("expansion {} must be positive", self.expand)));
        }
        if self.arch_file.is_none() && !presets::PRESET_NAMES.contains(&self.arch.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "unknown preset {:?}; expected one of {:?}",
                self.arch,
                presets::PRESET_NAMES
            )));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed is required".into()));
        }
        self.importance().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn target_sparsity(&self) -> f64 {
        self.sparsity_r.unwrap_or(self.budget)
    }

    pub fn importance(&self) -> ImportanceConfig {
        self.gates.importance(self.target_sparsity())
    }

    pub fn val_per_class(&self) -> usize {
        self.val_per_class.unwrap_or(match self.dataset {
            DatasetSource::Synth => 50,
            DatasetSource::Cifar10(_) => 500,
        })
    }

    /// The base architecture for the dataset's image shape, expanded.
    pub fn expanded_arch(&self, input_shape: [usize; 3], classes: usize) -> Result<ArchSpec> {
        let base = match &self.arch_file {
            Some(path) => ArchSpec::load(path)?,
            None => presets::by_name(&self.arch, input_shape, classes)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown preset {:?}", self.arch)))?,
        };
        Ok(base.expand_channels(self.expand)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = PipelineConfig::from_toml("budget = 0.4\narch = \"resnet-tiny\"\n[gates]\ngamma = 2.0\n").unwrap();
        assert_eq!(cfg.budget, 0.4);
        assert_eq!(cfg.gates.gamma, 2.0);
        assert_eq!(cfg.gates.epochs, 10);
        assert_eq!(cfg.target_sparsity(), 0.4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_toml("budget = 1.5").is_err());
        assert!(PipelineConfig::from_toml("arch = \"alexnet\"").is_err());
        assert!(PipelineConfig::from_toml("dataset = \"imagenet\"").is_err());
        assert!(PipelineConfig::from_toml("typo = 1").is_err());
    }

    #[test]
    fn dataset_source_parsing() {
        assert_eq!("synth".parse::<DatasetSource>().unwrap(), DatasetSource::Synth);
        assert_eq!(
            "cifar10:/data/c10".parse::<DatasetSource>().unwrap(),
            DatasetSource::Cifar10("/data/c10".into())
        );
        assert!("cifar10:".parse::<DatasetSource>().is_err());
    }
}
