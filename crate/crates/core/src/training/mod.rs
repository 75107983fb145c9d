//! Teacher-forced training: batching, Adam, the gold/noisy scheduler, the
//! early-stopping loop and checkpoints.

mod checkpoint;
mod fit;
mod schedule;

pub use checkpoint::{Checkpoint, CheckpointError, RngState};
pub use fit::{write_history_csv, FitOutcome, HistoryRow, StopReason, Trainer, TrainingData};
pub use schedule::{derive_seed, BatchDescriptor, BatchPlan, Interleave, Tag};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::eval::EvalError;
use crate::model::{ForwardMode, ModelError, Seq2SeqBatch, TokenBatch, Transformer};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};
use crate::tokenizer::{TokenizerError, Vocabulary, PAD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite value at step {step} ({tag} batch, example ids {ids:?}): {detail}")]
    NonFinite { step: u64, tag: &'static str, ids: Vec<u64>, detail: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub learning_rate: f64,
    /// Passes over the governing (gold) source.
    pub max_epochs: u64,
    pub interleave: Interleave,
    pub seed: u64,
    /// Steps between dev evaluations; 0 evaluates once per epoch.
    pub eval_every: u64,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub grad_clip: f64,
    /// Scale each example's loss by its weight.
    pub weighted_loss: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_src_len: 32,
            max_tgt_len: 32,
            learning_rate: 1e-3,
            max_epochs: 30,
            interleave: Interleave::default(),
            seed: 0,
            eval_every: 0,
            patience: 5,
            grad_clip: 1.0,
            weighted_loss: false,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.interleave.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
            ("eval_batch_size", self.eval_batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::Config(format!("grad_clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }
}

/// Adam with constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Zeroed moments shaped like `shapes`.
    pub fn new(learning_rate: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor<S>>, grads: &[Vec<S>]) {
        self.step += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let bc1 = S::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = S::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (S::of(self.learning_rate), S::of(self.eps));
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<S: Scalar>(grads: &[Vec<S>]) -> f64 {
    grads.iter().flatten().map(|g| g.to_f64_lossless().powi(2)).sum::<f64>().sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = S::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }
    norm
}

/// Encode, truncate and pad a batch. The decoder input is the target
/// shifted right behind a start token (PAD); PAD targets carry no loss.
pub fn make_batch(examples: &[&Example], vocab: &Vocabulary, max_src_len: usize, max_tgt_len: usize) -> Result<Seq2SeqBatch> {
    if examples.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    let mut src = Vec::with_capacity(examples.len());
    let mut tgt_in = Vec::with_capacity(examples.len());
    let mut tgt_out = Vec::with_capacity(examples.len());
    for ex in examples {
        src.push(vocab.encode(&ex.intent, max_src_len, true)?.ids);
        let target = vocab.encode(&ex.snippet, max_tgt_len, true)?.ids;
        let mut shifted = Vec::with_capacity(target.len());
        shifted.push(PAD);
        shifted.extend_from_slice(&target[..target.len() - 1]);
        tgt_in.push(shifted);
        tgt_out.push(target);
    }
    Ok(Seq2SeqBatch {
        src: TokenBatch::from_rows(&src),
        tgt_in: TokenBatch::from_rows(&tgt_in),
        tgt_out: TokenBatch::from_rows(&tgt_out),
    })
}

/// Number of loss-bearing (non-PAD) target positions.
pub fn loss_mask_total(batch: &Seq2SeqBatch) -> usize {
    batch.tgt_out.ids.iter().filter(|&&id| id != PAD).count()
}

/// Forward, masked cross-entropy, backward, clip and Adam update. Returns
/// the loss before the update.
pub fn train_step<S: Scalar>(
    model: &mut Transformer<S>,
    optimizer: &mut Adam<S>,
    batch: &Seq2SeqBatch,
    example_weights: Option<&[S]>,
    dropout_seed: u64,
    grad_clip: f64,
) -> std::result::Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut mode = ForwardMode::train(model.config.dropout_rate, dropout_seed);
    let loss = model.loss(&mut tape, &bound, batch, example_weights, &mut mode)?;
    let value = tape.value(loss).item().expect("scalar loss").to_f64_lossless();
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "loss" }.into());
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<S>> = bound
        .vars()
        .iter()
        .zip(model.params.iter())
        .map(|(&v, (_, t))| tape.take_grad(v).unwrap_or_else(|| vec![S::zero(); t.numel()]))
        .collect();
    if !grads.iter().flatten().all(|g| g.is_finite()) {
        return Err(TensorError::NonFinite { op: "gradient" }.into());
    }
    clip_global_norm(&mut grads, grad_clip);
    optimizer.update(model.params.tensors_mut(), &grads);
    Ok(value)
}

/// Teacher-forced argmax accuracy over non-PAD targets: (correct, total).
pub fn token_accuracy<S: Scalar>(model: &Transformer<S>, batch: &Seq2SeqBatch) -> std::result::Result<(usize, usize), ModelError> {
    let logits = model.logits(&batch.src, &batch.tgt_in)?;
    let v = model.config.vocab_size;
    let mut correct = 0;
    let mut total = 0;
    for (pos, &target) in batch.tgt_out.ids.iter().enumerate() {
        if target == PAD {
            continue;
        }
        let row = &logits.data()[pos * v..(pos + 1) * v];
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        correct += (best as u32 == target) as usize;
        total += 1;
    }
    Ok((correct, total))
}
