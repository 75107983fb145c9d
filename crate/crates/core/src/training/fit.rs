use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointError, RngState};
use super::schedule::{derive_seed, BatchPlan, Tag};
use super::{make_batch, train_step, Adam, Result, TrainConfig, TrainError};
use crate::corpus::Example;
use crate::eval::{evaluate, GreedyGenerator};
use crate::model::{ModelError, Parameters, Transformer};
use crate::tensor::{Scalar, TensorError};
use crate::tokenizer::Vocabulary;

const DROPOUT_STREAM: u64 = 0xD0;

/// Gold and noisy training sets plus the dev set used for model selection.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub gold: &'a [Example],
    pub noisy: &'a [Example],
    pub dev: &'a [Example],
}

/// One optimizer step. `dev_bleu` is set on evaluation steps only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub train_loss: f64,
    pub dev_bleu: Option<f64>,
    pub tag: Tag,
    pub gold_batches: u64,
    pub noisy_batches: u64,
    pub epoch: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    StepLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub stop: StopReason,
    pub steps: u64,
    pub best_dev_bleu: Option<f64>,
}

pub struct Trainer<'a, S: Scalar> {
    pub model: Transformer<S>,
    pub optimizer: Adam<S>,
    pub config: TrainConfig,
    pub step: u64,
    pub best_dev_bleu: Option<f64>,
    pub best_params: Parameters<S>,
    pub evals_without_improvement: usize,
    pub history: Vec<HistoryRow>,
    vocab: &'a Vocabulary,
    data: TrainingData<'a>,
    plan: BatchPlan,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(model: Transformer<S>, vocab: &'a Vocabulary, data: TrainingData<'a>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.dev.is_empty() {
            return Err(TrainError::Empty("dev set"));
        }
        if vocab.len() != model.config.vocab_size {
            return Err(TrainError::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let plan = BatchPlan::new(data.gold.len(), data.noisy.len(), config.batch_size, config.interleave, config.seed)?;
        let shapes: Vec<Vec<usize>> = model.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
        Ok(Trainer {
            optimizer: Adam::new(config.learning_rate, &shapes),
            best_params: model.params.clone(),
            model,
            config,
            step: 0,
            best_dev_bleu: None,
            evals_without_improvement: 0,
            history: Vec::new(),
            vocab,
            data,
            plan,
        })
    }

    /// Continue a run from its checkpoint with the same data.
    pub fn resume(checkpoint: &Checkpoint, vocab: &'a Vocabulary, data: TrainingData<'a>) -> Result<Self> {
        checkpoint.check_vocabulary(vocab)?;
        let model = Transformer::from_parameters(checkpoint.model_config.clone(), checkpoint.params.cast())?;
        let mut trainer = Trainer::new(model, vocab, data, checkpoint.train_config.clone())?;
        trainer.optimizer = Adam {
            learning_rate: checkpoint.adam.learning_rate,
            beta1: checkpoint.adam.beta1,
            beta2: checkpoint.adam.beta2,
            eps: checkpoint.adam.eps,
            step: checkpoint.adam.step,
            m: checkpoint.adam.m.iter().map(|t| t.cast()).collect(),
            v: checkpoint.adam.v.iter().map(|t| t.cast()).collect(),
        };
        trainer.step = checkpoint.step;
        trainer.best_dev_bleu = checkpoint.best_dev_bleu;
        trainer.best_params = checkpoint.best_params.cast();
        trainer.evals_without_improvement = checkpoint.evals_without_improvement;
        trainer.history = checkpoint.history.clone();
        Ok(trainer)
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn total_steps(&self) -> u64 {
        self.plan.steps_for_epochs(self.config.max_epochs)
    }

    fn source(&self, tag: Tag) -> &'a [Example] {
        match tag {
            Tag::Gold => self.data.gold,
            Tag::Noisy => self.data.noisy,
        }
    }

    /// Train on the next scheduled batch.
    pub fn train_one(&mut self) -> Result<HistoryRow> {
        let desc = self.plan.batch(self.step);
        let source = self.source(desc.tag);
        let examples: Vec<&Example> = desc.indices.iter().map(|&i| &source[i]).collect();
        let batch = make_batch(&examples, self.vocab, self.config.max_src_len, self.config.max_tgt_len)?;
        let weights: Option<Vec<S>> =
            self.config.weighted_loss.then(|| examples.iter().map(|e| S::of(e.weight)).collect());
        let seed = derive_seed(self.config.seed, &[DROPOUT_STREAM, self.step]);
        let loss = train_step(&mut self.model, &mut self.optimizer, &batch, weights.as_deref(), seed, self.config.grad_clip)
            .map_err(|e| match e {
                ModelError::Tensor(TensorError::NonFinite { op }) => TrainError::NonFinite {
                    step: self.step,
                    tag: desc.tag.as_str(),
                    ids: examples.iter().map(|e| e.id).collect(),
                    detail: format!("produced by {op}"),
                },
                other => other.into(),
            })?;
        self.step += 1;
        let (mut gold, mut noisy) = self.history.last().map_or((0, 0), |r| (r.gold_batches, r.noisy_batches));
        match desc.tag {
            Tag::Gold => gold += 1,
            Tag::Noisy => noisy += 1,
        }
        let row = HistoryRow {
            step: self.step,
            train_loss: loss,
            dev_bleu: None,
            tag: desc.tag,
            gold_batches: gold,
            noisy_batches: noisy,
            epoch: self.plan.epochs_completed(self.step),
        };
        self.history.push(row.clone());
        Ok(row)
    }

    fn is_eval_step(&self) -> bool {
        if self.step == self.total_steps() {
            return true;
        }
        if self.config.eval_every > 0 {
            return self.step.is_multiple_of(self.config.eval_every);
        }
        self.plan.epochs_completed(self.step) > self.plan.epochs_completed(self.step - 1)
    }

    /// Greedy-decode the dev set with the current parameters.
    pub fn dev_bleu(&self) -> Result<f64> {
        let mut generator = GreedyGenerator {
            model: &self.model,
            vocab: self.vocab,
            max_src_len: self.config.max_src_len,
            max_len: self.config.max_tgt_len,
            batch_size: self.config.eval_batch_size,
        };
        Ok(evaluate(&mut generator, self.data.dev)?.bleu)
    }

    /// Train until max_epochs, patience runs out, or `step_limit` total steps.
    /// `after_eval` runs after every dev evaluation.
    pub fn run<F>(&mut self, step_limit: Option<u64>, mut after_eval: F) -> Result<FitOutcome>
    where
        F: FnMut(&Self) -> Result<()>,
    {
        let total = self.total_steps();
        let stop = loop {
            if self.evals_without_improvement > self.config.patience {
                break StopReason::Patience;
            }
            if self.step >= total {
                break StopReason::MaxEpochs;
            }
            if step_limit.is_some_and(|limit| self.step >= limit) {
                break StopReason::StepLimit;
            }
            self.train_one()?;
            if self.is_eval_step() {
                let bleu = self.dev_bleu()?;
                self.history.last_mut().expect("row just pushed").dev_bleu = Some(bleu);
                if self.best_dev_bleu.is_none_or(|best| bleu > best) {
                    self.best_dev_bleu = Some(bleu);
                    self.best_params = self.model.params.clone();
                    self.evals_without_improvement = 0;
                } else {
                    self.evals_without_improvement += 1;
                }
                after_eval(self)?;
            }
        };
        Ok(FitOutcome { stop, steps: self.step, best_dev_bleu: self.best_dev_bleu })
    }

    pub fn best_model(&self) -> Transformer<S> {
        Transformer { config: self.model.config.clone(), params: self.best_params.clone() }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            vocab_hash: self.vocab.content_hash(),
            step: self.step,
            best_dev_bleu: self.best_dev_bleu,
            evals_without_improvement: self.evals_without_improvement,
            rng: RngState::for_seed(self.config.seed),
            history: self.history.clone(),
            params: self.model.params.cast(),
            best_params: self.best_params.cast(),
            adam: Adam {
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                step: self.optimizer.step,
                m: self.optimizer.m.iter().map(|t| t.cast()).collect(),
                v: self.optimizer.v.iter().map(|t| t.cast()).collect(),
            },
        }
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> std::result::Result<(), CheckpointError> {
        self.checkpoint().save(path)
    }
}

/// History as CSV: step,train_loss,dev_bleu followed by the batch tag,
/// cumulative gold/noisy batch counts and completed epochs.
pub fn write_history_csv<W: std::io::Write>(rows: &[HistoryRow], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "train_loss", "dev_bleu", "tag", "gold_batches", "noisy_batches", "epoch"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.train_loss.to_string(),
            r.dev_bleu.map(|b| b.to_string()).unwrap_or_default(),
            r.tag.as_str().to_string(),
            r.gold_batches.to_string(),
            r.noisy_batches.to_string(),
            r.epoch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
