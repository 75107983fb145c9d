//! Natural-language to code generation from scratch: dataset loaders, a
//! byte-level BPE tokenizer, a tape-based autodiff engine, a small T5-style
//! encoder-decoder, greedy and beam decoding, corpus BLEU, and a trainer
//! that interleaves gold and noisy batches.
//!
//! Numeric code is generic over [`tensor::Scalar`] (`f32` for training,
//! `f64` for gradient checks). The aliases below name the usual choices.

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

use thiserror::Error;

/// Any failure raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] tokenizer::TokenizerError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Decode(#[from] decode::DecodeError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] training::CheckpointError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Parameters32 = model::Parameters<f32>;
pub type Parameters64 = model::Parameters<f64>;
pub type Transformer32 = model::Transformer<f32>;
pub type Transformer64 = model::Transformer<f64>;
pub type Trainer32<'a> = training::Trainer<'a, f32>;
pub type Trainer64<'a> = training::Trainer<'a, f64>;
