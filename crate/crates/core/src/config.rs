//! Run configuration: one JSON document with a documented default for every
//! field. Unknown keys are rejected so typos fail loudly.

use crate::corpus::CorruptionRates;
use crate::nn::PoolMode;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

/// Transformer predictor sizes. Desk-scale defaults; the paper-scale setting
/// (d=512, 8 heads, 6 layers, ff=2048, 5 experts) is selectable here.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding / hidden width d.
    pub d: usize,
    /// Attention heads (must divide d).
    pub heads: usize,
    /// Unified blocks per conditional encoder.
    pub layers: usize,
    /// Feed-forward hidden units.
    pub ff: usize,
    /// Mixture expert count K.
    pub expert_count: usize,
    /// Longest supported sequence (positions table size).
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 2,
            ff: 128,
            expert_count: 3,
            max_len: 64,
        }
    }
}

/// Synthetic data generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Content vocabulary size (specials come on top).
    pub vocab_content_size: usize,
    /// Parallel pairs to generate.
    pub n_pairs: usize,
    /// Latent translation styles in the synthetic corpus.
    pub style_count: usize,
    /// BPE merges to train for the vocabulary (0 = whole-word tokens).
    pub bpe_merges: usize,
    /// Corruption process for QE label synthesis.
    pub corruption: CorruptionRates,
    /// Train/dev/test fractions (must sum to 1).
    pub split: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            vocab_content_size: 48,
            n_pairs: 2000,
            style_count: 3,
            bpe_merges: 0,
            corruption: CorruptionRates {
                sub: 0.25,
                del: 0.08,
                ins: 0.06,
            },
            split: (0.7, 0.15, 0.15),
        }
    }
}

/// Optimization budgets. Training is single precision, single threaded.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Epochs over the parallel corpus for the NMT predictor.
    pub nmt_epochs: usize,
    /// Pretraining steps (batches) for the masked LM.
    pub xlm_steps: usize,
    /// Probability a pretraining batch is a translation-pair batch.
    pub tlm_mix: f64,
    /// Masking selection rate for the masked LM.
    pub mask_rate: f64,
    /// Epochs over QE training features for each estimator task.
    pub estimator_epochs: usize,
    pub estimator_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            nmt_epochs: 6,
            xlm_steps: 1200,
            tlm_mix: 0.5,
            mask_rate: 0.15,
            estimator_epochs: 20,
            estimator_lr: 1e-3,
        }
    }
}

/// Estimator architecture and prediction blending.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    /// Bi-GRU hidden size h (one weight set shared by both streams).
    pub hidden: usize,
    /// Hidden units of the two-layer heads.
    pub head_hidden: usize,
    /// k of the sentence-level top-k pooling.
    pub pool_k: usize,
    /// Reduction over the top-k values (mean-of-top-k, or the literal max
    /// reading under which any k degenerates to global max pooling).
    pub pool_mode: PoolMode,
    /// Weight of the NMT stream when blending per-class probabilities; the
    /// XLM stream gets `1 - blend_nmt`.
    pub blend_nmt: f64,
    /// Cross-entropy weight of the BAD class for word/gap training.
    pub bad_weight: f64,
    /// Probability threshold above which a position is tagged BAD.
    pub tag_threshold: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            hidden: 48,
            head_hidden: 32,
            pool_k: 3,
            pool_mode: PoolMode::MeanOfTopK,
            blend_nmt: 0.8,
            bad_weight: 1.0,
            tag_threshold: 0.5,
        }
    }
}

/// Corpus filtering and the retraining comparison.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSettings {
    /// Fraction of pairs (highest predicted HTER) to drop.
    pub drop_fraction: f64,
    /// Fraction of corpus pairs that get synthetically corrupted targets in
    /// the filtering experiment.
    pub corrupt_fraction: f64,
    /// Random seeds for the retraining comparison.
    pub experiment_seeds: Vec<u64>,
    /// Size of the (partly corrupted) corpus the experiment filters.
    pub experiment_pairs: usize,
    /// Clean held-out pairs for dev BLEU.
    pub experiment_dev_pairs: usize,
    /// Retraining epochs; dev BLEU is measured after each epoch and the
    /// best three checkpoints' scores are averaged.
    pub retrain_epochs: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            drop_fraction: 0.2,
            corrupt_fraction: 0.2,
            experiment_seeds: vec![1, 2, 3],
            experiment_pairs: 360,
            experiment_dev_pairs: 60,
            retrain_epochs: 4,
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stochastic stage derives a named stream from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub estimator: EstimatorSettings,
    pub filter: FilterSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.heads == 0 || self.model.d % self.model.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "model.d ({}) must be divisible by model.heads ({})",
                self.model.d, self.model.heads
            )));
        }
        if self.model.expert_count == 0 {
            return Err(ConfigError::Invalid("model.expert_count must be >= 1".into()));
        }
        if self.data.style_count == 0 || self.data.n_pairs == 0 {
            return Err(ConfigError::Invalid(
                "data.style_count and data.n_pairs must be >= 1".into(),
            ));
        }
        let (a, b, c) = self.data.split;
        if ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "data.split must sum to 1, got {:?}",
                self.data.split
            )));
        }
        self.data
            .corruption
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.estimator.blend_nmt) {
            return Err(ConfigError::Invalid(
                "estimator.blend_nmt must lie in [0,1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.filter.drop_fraction) {
            return Err(ConfigError::Invalid(
                "filter.drop_fraction must lie in [0,1)".into(),
            ));
        }
        if self.estimator.pool_k == 0 {
            return Err(ConfigError::Invalid("estimator.pool_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Write the fully resolved configuration into an output directory.
    pub fn echo_into(&self, dir: &Path) -> Result<(), ConfigError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_pretty_json() + "\n")?;
        Ok(())
    }
}
