//! Greedy and beam-search generation over any step-wise decoder.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{IncrementalDecoder, ModelError, TokenBatch, Transformer};
use crate::tensor::Scalar;
use crate::tokenizer::{EOS, PAD};

/// Decoder input at the first step.
pub const START: u32 = PAD;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// `log_prob / len^alpha`.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        let len = self.ids.len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }

    /// Ids without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        match self.ids.last() {
            Some(&EOS) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// A decoder that consumes one token per row and yields next-token
/// log-probabilities for each row.
pub trait StepDecoder {
    fn rows(&self) -> usize;
    fn step(&mut self, tokens: &[u32]) -> Result<Vec<Vec<f64>>>;
    /// Keep rows `indices` in that order; duplicates allowed.
    fn reorder(&mut self, indices: &[usize]) -> Result<()>;
}

/// Numerically stable log-softmax in f64.
pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|x| x.to_f64_lossless()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

impl<S: Scalar> StepDecoder for IncrementalDecoder<'_, S> {
    fn rows(&self) -> usize {
        IncrementalDecoder::rows(self)
    }

    fn step(&mut self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let logits = IncrementalDecoder::step(self, tokens)?;
        let v = logits.shape()[1];
        Ok(logits.data().chunks(v.max(1)).map(log_softmax).collect())
    }

    fn reorder(&mut self, indices: &[usize]) -> Result<()> {
        Ok(IncrementalDecoder::reorder(self, indices)?)
    }
}

/// Highest-scoring id, lowest id on ties.
fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of every row of `decoder` together.
pub fn greedy_with<D: StepDecoder>(decoder: &mut D, max_len: usize) -> Result<Vec<Hypothesis>> {
    if max_len == 0 {
        return Err(DecodeError::Argument("max_len must be at least 1".into()));
    }
    let rows = decoder.rows();
    let mut hyps = vec![Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false }; rows];
    let mut input = vec![START; rows];
    for t in 0..max_len {
        let log_probs = decoder.step(&input)?;
        for (r, hyp) in hyps.iter_mut().enumerate() {
            if hyp.finished {
                input[r] = PAD;
                continue;
            }
            let id = argmax(&log_probs[r]);
            hyp.ids.push(id);
            hyp.log_prob += log_probs[r][id as usize];
            hyp.finished = id == EOS || t + 1 == max_len;
            input[r] = id;
        }
        if hyps.iter().all(|h| h.finished) {
            break;
        }
    }
    Ok(hyps)
}

/// Beam search for the single row of `decoder`.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `beam_size` best by total log-probability (ties by earlier parent, then
/// lower id). Kept candidates ending in EOS retire, shrinking the live beam;
/// at `max_len` the remaining live ones retire too. The result is sorted by
/// `log_prob / len^alpha`, best first, at most `beam_size` long.
pub fn beam_with<D: StepDecoder>(
    decoder: &mut D,
    beam_size: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(DecodeError::Argument("beam_size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(DecodeError::Argument("max_len must be at least 1".into()));
    }
    if decoder.rows() != 1 {
        return Err(DecodeError::Argument(format!("beam search needs one source row, got {}", decoder.rows())));
    }
    let mut live = vec![Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut input = vec![START];
    for t in 0..max_len {
        let log_probs = decoder.step(&input)?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (parent, row) in log_probs.iter().enumerate() {
            for (id, &lp) in row.iter().enumerate() {
                candidates.push((live[parent].log_prob + lp, parent, id as u32));
            }
        }
        let width = beam_size.min(candidates.len());
        let order = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if width < candidates.len() {
            candidates.select_nth_unstable_by(width - 1, order);
            candidates.truncate(width);
        }
        candidates.sort_by(order);

        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (score, parent, id) in candidates {
            let mut ids = live[parent].ids.clone();
            ids.push(id);
            let finished = id == EOS || t + 1 == max_len;
            let hyp = Hypothesis { ids, log_prob: score, finished };
            if finished {
                done.push(hyp);
            } else {
                parents.push(parent);
                next.push(hyp);
            }
        }
        if next.is_empty() {
            break;
        }
        decoder.reorder(&parents)?;
        input = next.iter().map(|h| *h.ids.last().expect("non-empty")).collect();
        live = next;
    }
    done.sort_by(|a, b| b.normalized_score(alpha).partial_cmp(&a.normalized_score(alpha)).unwrap_or(Ordering::Equal));
    done.truncate(beam_size);
    Ok(done)
}

/// Greedy decoding of each source (already encoded with EOS).
pub fn greedy<S: Scalar>(model: &Transformer<S>, sources: &[Vec<u32>], max_len: usize) -> Result<Vec<Hypothesis>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let mut decoder = model.start_decoding(sources)?;
    greedy_with(&mut decoder, max_len)
}

pub fn beam<S: Scalar>(
    model: &Transformer<S>,
    source: &[u32],
    beam_size: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    let mut decoder = model.start_decoding(&[source.to_vec()])?;
    beam_with(&mut decoder, beam_size, max_len, alpha)
}

/// Teacher-forced log-probability of `ids` given `source`.
pub fn score<S: Scalar>(model: &Transformer<S>, source: &[u32], ids: &[u32]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut input = vec![START];
    input.extend_from_slice(&ids[..ids.len() - 1]);
    let logits = model.logits(&TokenBatch::from_rows(&[source.to_vec()]), &TokenBatch::from_rows(&[input]))?;
    let v = model.config.vocab_size;
    Ok(ids
        .iter()
        .enumerate()
        .map(|(t, &id)| log_softmax(&logits.data()[t * v..(t + 1) * v])[id as usize])
        .sum())
}
