//! Experiment configuration in TOML.
//!
//! Unknown keys are rejected at every level. [`ExperimentConfig::canonical`]
//! renders the config with sorted keys so equal configs hash equally.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterVariant};
use crate::error::{config_err, Error, Result};
use crate::merged_qkv::Channel;
use crate::model::{ModelSpec, Placement, Profile, Trainability, Weight};
use crate::tasks::TaskConfig;
use crate::train::{PrimaryMetric, TrainConfig};

/// Adapter hyperparameters plus where to place them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub variant: AdapterVariant,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub dropout: f64,
    pub profile: Profile,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sites: Vec<Weight>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<Channel>,
}

fn default_init_std() -> f64 {
    0.02
}

impl AdapterSection {
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            alpha: self.alpha,
            variant: self.variant,
            init_std: self.init_std,
            dropout: self.dropout,
        }
    }

    pub fn placement(&self) -> Placement {
        Placement {
            profile: self.profile.clone(),
            sites: self.sites.clone(),
            channels: self.channels.clone(),
        }
    }
}

/// Headline statistic of the multi-seed report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReportStat {
    #[default]
    Median,
    Mean,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// No section means no adapters: the base is trained (or kept frozen,
    /// per `trainability`) as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSection>,
    pub train: TrainConfig,
    pub task: TaskConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub report: ReportStat,
    #[serde(default)]
    pub primary_metric: PrimaryMetric,
    #[serde(default)]
    pub trainability: Trainability,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Sorted-key TOML rendering.
    pub fn canonical(&self) -> Result<String> {
        canonical_toml(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.task.max_len() > self.model.max_seq_len {
            return Err(config_err(format!(
                "task examples have {} tokens but max_seq_len is {}",
                self.task.max_len(),
                self.model.max_seq_len
            )));
        }
        if let crate::model::HeadKind::Classifier { n_classes } = self.model.head {
            if n_classes != 2 {
                return Err(config_err("the bundled tasks are binary; set n_classes = 2"));
            }
        } else {
            return Err(config_err("the bundled tasks need a classifier head"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        if let Some(ad) = &self.adapter {
            ad.adapter_config().validate()?;
            ad.placement().resolve(&self.model)?;
        }
        Ok(())
    }
}

/// Serializes through a `toml::Value`, whose tables keep keys sorted.
pub fn canonical_toml<T: Serialize>(value: &T) -> Result<String> {
    let v = toml::Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    toml::to_string(&v).map_err(|e| Error::Config(e.to_string()))
}

/// A ready-to-run configuration on the bracket task at desk scale.
pub fn default_bracket_config(variant: Option<AdapterVariant>, rank: usize) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec {
            vocab_size: 32,
            d_model: 32,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 64,
            max_seq_len: 32,
            fused_qkv: false,
            head: crate::model::HeadKind::Classifier { n_classes: 2 },
            init_std: 0.02,
        },
        adapter: variant.map(|variant| AdapterSection {
            variant,
            rank,
            alpha: 16.0,
            init_std: 0.02,
            dropout: 0.0,
            profile: Profile::Nlu,
            sites: vec![],
            channels: vec![],
        }),
        train: TrainConfig::default(),
        task: TaskConfig::bracket(16, 0.68),
        seeds: default_seeds(),
        report: ReportStat::Median,
        primary_metric: PrimaryMetric::Mcc,
        trainability: Trainability {
            frozen_base: true,
            ..Trainability::default()
        },
    }
}
