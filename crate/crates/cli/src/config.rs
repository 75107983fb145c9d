//! Run configuration: a TOML file with `[data]`, `[tokenizer]`, `[model]`,
//! `[train]`, `[decode]` and `[cv]` tables, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nl2code::model::ModelConfig;
use nl2code::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub gold: Option<PathBuf>,
    pub noisy: Option<PathBuf>,
    pub nl2lf: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Mined pairs below this confidence are dropped at load time.
    pub min_weight: f64,
    /// Use only the first N mined pairs.
    pub noisy_limit: Option<usize>,
    /// Held-out dev examples carved from the training set; unset means
    /// a tenth of it, capped at 200. 0 selects on the training set.
    pub dev_size: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { gold: None, noisy: None, nl2lf: None, vocab: None, out: None, min_weight: 0.0, noisy_limit: None, dev_size: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_size: 4000 }
    }
}

/// Model shape without the vocabulary size, which comes from the tokenizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_relative_buckets: usize,
    pub max_relative_distance: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        ModelSection {
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            d_ff: desk.d_ff,
            n_encoder_layers: desk.n_encoder_layers,
            n_decoder_layers: desk.n_decoder_layers,
            n_relative_buckets: desk.n_relative_buckets,
            max_relative_distance: desk.max_relative_distance,
            dropout_rate: 0.1,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            n_relative_buckets: self.n_relative_buckets,
            max_relative_distance: self.max_relative_distance,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// 1 means greedy.
    pub beam_size: usize,
    pub length_alpha: f64,
    /// Generation length cap; unset means the training target length.
    pub max_len: Option<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { beam_size: 4, length_alpha: 0.6, max_len: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    pub train_fraction: f64,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection { folds: 5, train_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub cv: CvSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.data.out.as_deref().ok_or_else(|| UsageError("no output directory: pass --out or set data.out".into()).into())
    }

    /// Write the fully resolved config next to the run's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join("config.toml");
        let text = toml::to_string_pretty(self).context("cannot serialise config")?;
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn dev_size(&self, train_len: usize) -> usize {
        self.data.dev_size.unwrap_or((train_len / 10).clamp(1, 200))
    }
}
