//! Checkpoint layout: the magic `NL2CKPT1`, a little-endian u64 header
//! length, the header as compact JSON, then the tensor sections `params`,
//! `adam_m`, `adam_v` and `best_params`. Each section is every tensor in
//! header order as little-endian f32, and the header stores its SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::fit::HistoryRow;
use super::{Adam, TrainConfig};
use crate::model::{ModelConfig, ModelError, Parameters, Transformer};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"NL2CKPT1";
const SECTIONS: [&str; 4] = ["params", "adam_m", "adam_v", "best_params"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated in {section}")]
    Truncated { section: String },
    #[error("checkpoint header is invalid: {0}")]
    Header(String),
    #[error("checkpoint section `{section}` is corrupt (SHA-256 mismatch)")]
    SectionHash { section: String },
    #[error("checkpoint was trained with vocabulary {expected} but {found} was supplied")]
    VocabMismatch { expected: String, found: String },
    #[error("checkpoint does not match its config: {0}")]
    Incompatible(String),
}

/// How stochastic choices are seeded. Every random draw derives from the
/// seed and the step index, so no generator state needs to be stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub scheme: String,
}

impl RngState {
    pub fn for_seed(seed: u64) -> Self {
        RngState { seed, scheme: "chacha8/splitmix64(seed, stream, index)".into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub best_dev_bleu: Option<f64>,
    pub evals_without_improvement: usize,
    pub rng: RngState,
    pub history: Vec<HistoryRow>,
    pub params: Parameters<f32>,
    pub best_params: Parameters<f32>,
    pub adam: Adam<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_hash: String,
    step: u64,
    best_dev_bleu: Option<f64>,
    evals_without_improvement: usize,
    rng: RngState,
    optimizer: OptimizerHeader,
    tensors: Vec<TensorEntry>,
    sections: Vec<SectionEntry>,
    history: Vec<HistoryRow>,
}

fn section_bytes<'t>(tensors: impl Iterator<Item = &'t Tensor<f32>>) -> Vec<u8> {
    tensors.flat_map(|t| t.data().iter().flat_map(|x| x.to_le_bytes())).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let sections: Vec<Vec<u8>> = vec![
            section_bytes(self.params.iter().map(|(_, t)| t)),
            section_bytes(self.adam.m.iter()),
            section_bytes(self.adam.v.iter()),
            section_bytes(self.best_params.iter().map(|(_, t)| t)),
        ];
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            step: self.step,
            best_dev_bleu: self.best_dev_bleu,
            evals_without_improvement: self.evals_without_improvement,
            rng: self.rng.clone(),
            optimizer: OptimizerHeader {
                learning_rate: self.adam.learning_rate,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                step: self.adam.step,
            },
            tensors: self.params.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
            sections: SECTIONS
                .iter()
                .zip(&sections)
                .map(|(name, bytes)| SectionEntry { name: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) })
                .collect(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + sections.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &sections {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated { section: "header".into() })?;
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        header.model_config.validate().map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
        let expected: Vec<(String, Vec<usize>)> = header.model_config.parameter_shapes();
        let listed: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != listed {
            return Err(CheckpointError::Incompatible("tensor names or shapes differ from the model config".into()));
        }
        if header.sections.iter().map(|s| s.name.as_str()).ne(SECTIONS) {
            return Err(CheckpointError::Header(format!("expected sections {SECTIONS:?}")));
        }
        let floats: usize = listed.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let mut offset = header_end;
        let mut decoded: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(SECTIONS.len());
        for entry in &header.sections {
            let len = entry.bytes as usize;
            if len != floats * 4 {
                return Err(CheckpointError::Header(format!("section {} has {} bytes, expected {}", entry.name, len, floats * 4)));
            }
            let chunk = bytes
                .get(offset..offset + len)
                .ok_or_else(|| CheckpointError::Truncated { section: entry.name.clone() })?;
            if sha256_hex(chunk) != entry.sha256 {
                return Err(CheckpointError::SectionHash { section: entry.name.clone() });
            }
            let mut values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
            let tensors = listed
                .iter()
                .map(|(_, shape)| {
                    let n = shape.iter().product();
                    Tensor::new(shape.clone(), values.by_ref().take(n).collect()).expect("length checked above")
                })
                .collect();
            decoded.push(tensors);
            offset += len;
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Header(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let named = |tensors: Vec<Tensor<f32>>| {
            Parameters::from_entries(listed.iter().map(|(n, _)| n.clone()).zip(tensors).collect())
        };
        let mut decoded = decoded.into_iter();
        let params = named(decoded.next().expect("four sections"));
        let m = decoded.next().expect("four sections");
        let v = decoded.next().expect("four sections");
        let best_params = named(decoded.next().expect("four sections"));
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            vocab_hash: header.vocab_hash,
            step: header.step,
            best_dev_bleu: header.best_dev_bleu,
            evals_without_improvement: header.evals_without_improvement,
            rng: header.rng,
            history: header.history,
            params,
            best_params,
            adam: Adam {
                learning_rate: header.optimizer.learning_rate,
                beta1: header.optimizer.beta1,
                beta2: header.optimizer.beta2,
                eps: header.optimizer.eps,
                step: header.optimizer.step,
                m,
                v,
            },
        })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<(), CheckpointError> {
        let found = vocab.content_hash();
        if found != self.vocab_hash {
            return Err(CheckpointError::VocabMismatch { expected: self.vocab_hash.clone(), found });
        }
        Ok(())
    }

    /// Model with the parameters that scored best on the dev set.
    pub fn best_model(&self) -> Result<Transformer<f32>, ModelError> {
        Transformer::from_parameters(self.model_config.clone(), self.best_params.clone())
    }

    pub fn last_model(&self) -> Result<Transformer<f32>, ModelError> {
        Transformer::from_parameters(self.model_config.clone(), self.params.clone())
    }
}
