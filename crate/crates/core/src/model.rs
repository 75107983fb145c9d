//! Encoder-decoder Transformer with T5-style relative position biases,
//! pre-norm residual blocks (RMS norm, no biases) and a tied output
//! projection.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenizer::PAD;

/// Additive penalty applied to masked attention scores.
pub const MASK_PENALTY: f64 = -1e9;
const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attention row (batch {batch}, query {query}) has no unmasked key")]
    EmptyAttention { batch: usize, query: usize },
    #[error("{0}")]
    Shape(String),
    #[error("parameter `{0}` is missing")]
    MissingParameter(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_relative_buckets: usize,
    pub max_relative_distance: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Laptop-sized defaults: d_model 128, 4 heads, d_ff 512, 2+2 layers.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_relative_buckets: 32,
            max_relative_distance: 128,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("max_relative_distance", self.max_relative_distance),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.n_relative_buckets < 2 {
            return Err(ModelError::Config("n_relative_buckets must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter name and shape, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff, h, nb) = (self.d_model, self.d_ff, self.n_heads, self.n_relative_buckets);
        let mut out = vec![("shared.embedding".to_string(), vec![self.vocab_size, d])];
        let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{prefix}.{w}"), vec![d, d]));
            }
        };
        out.push(("encoder.relative_bias".into(), vec![nb, h]));
        for i in 0..self.n_encoder_layers {
            let p = format!("encoder.layers.{i}");
            out.push((format!("{p}.attn_norm"), vec![d]));
            attn(&mut out, &format!("{p}.attn"));
            out.push((format!("{p}.ffn_norm"), vec![d]));
            out.push((format!("{p}.ffn.w1"), vec![d, ff]));
            out.push((format!("{p}.ffn.w2"), vec![ff, d]));
        }
        out.push(("encoder.final_norm".into(), vec![d]));
        out.push(("decoder.relative_bias".into(), vec![nb, h]));
        for i in 0..self.n_decoder_layers {
            let p = format!("decoder.layers.{i}");
            out.push((format!("{p}.self_norm"), vec![d]));
            attn(&mut out, &format!("{p}.self_attn"));
            out.push((format!("{p}.cross_norm"), vec![d]));
            attn(&mut out, &format!("{p}.cross_attn"));
            out.push((format!("{p}.ffn_norm"), vec![d]));
            out.push((format!("{p}.ffn.w1"), vec![d, ff]));
            out.push((format!("{p}.ffn.w2"), vec![ff, d]));
        }
        out.push(("decoder.final_norm".into(), vec![d]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named model weights in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Parameters<S> {
    pub fn from_entries(entries: Vec<(String, Tensor<S>)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Parameters { entries, index }
    }

    /// Embeddings and projections ~ N(0, 1/√d_model); RMS gains 1; relative
    /// bias tables 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (config.d_model as f64).sqrt();
        let entries = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with("_norm") {
                    Tensor::full(shape, S::one())
                } else if name.ends_with("relative_bias") {
                    Tensor::zeros(shape)
                } else {
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            S::of(z * std)
                        })
                        .collect();
                    Tensor::new(shape, data).expect("shape matches sample count")
                };
                (name, tensor)
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters::from_entries(self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect())
    }

    /// Check names and shapes against a config.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let expected = config.parameter_shapes();
        expected.len() == self.entries.len()
            && expected.iter().zip(&self.entries).all(|((n, s), (m, t))| n == m && s.as_slice() == t.shape())
    }
}

/// T5 relative-position bucket for `distance = key_position − query_position`.
///
/// Half the buckets (bidirectional) or all of them (unidirectional) cover
/// distances `0..max_exact` exactly, the rest grow logarithmically up to
/// `max_distance`, beyond which everything shares the last bucket. In the
/// bidirectional case keys after the query use the upper half.
pub fn relative_bucket(distance: i64, bidirectional: bool, n_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = n_buckets as i64;
    let mut offset = 0;
    let mut n = -distance;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            offset = buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = (buckets / 2).max(1);
    if n < max_exact {
        return (offset + n.min(buckets - 1)) as usize;
    }
    let span = (max_distance as f64 / max_exact as f64).ln();
    let large = if span > 0.0 {
        let scaled = (n as f64 / max_exact as f64).ln() / span * (buckets - max_exact) as f64;
        max_exact + scaled as i64
    } else {
        buckets - 1
    };
    (offset + large.min(buckets - 1)) as usize
}

/// Which keys each query may attend to, shape `[batch, q_len, k_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    keep: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, q_len: usize, k_len: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * q_len * k_len {
            return Err(ModelError::Shape(format!(
                "mask of {} entries for [{batch}, {q_len}, {k_len}]",
                keep.len()
            )));
        }
        Ok(AttnMask { batch, q_len, k_len, keep })
    }

    /// Hide PAD keys from every query.
    pub fn key_padding(keys: &TokenBatch, q_len: usize) -> Self {
        let mut keep = Vec::with_capacity(keys.batch * q_len * keys.len);
        for b in 0..keys.batch {
            let row = keys.row(b);
            for _ in 0..q_len {
                keep.extend(row.iter().map(|&id| id != PAD));
            }
        }
        AttnMask { batch: keys.batch, q_len, k_len: keys.len, keep }
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(batch: usize, len: usize) -> Self {
        let mut keep = Vec::with_capacity(batch * len * len);
        for _ in 0..batch {
            for q in 0..len {
                keep.extend((0..len).map(|k| k <= q));
            }
        }
        AttnMask { batch, q_len: len, k_len: len, keep }
    }

    pub fn allows(&self, batch: usize, query: usize, key: usize) -> bool {
        self.keep[(batch * self.q_len + query) * self.k_len + key]
    }

    fn penalty<S: Scalar>(&self) -> Result<Tensor<S>> {
        for b in 0..self.batch {
            for q in 0..self.q_len {
                if !(0..self.k_len).any(|k| self.allows(b, q, k)) {
                    return Err(ModelError::EmptyAttention { batch: b, query: q });
                }
            }
        }
        let data = self.keep.iter().map(|&k| if k { S::zero() } else { S::of(MASK_PENALTY) }).collect();
        Ok(Tensor::new(vec![self.batch, 1, self.q_len, self.k_len], data)?)
    }
}

/// `softmax(q·kᵀ/√d_head + bias + mask_penalty)·v`.
///
/// `q` is `[B, H, Tq, dh]`, `k`/`v` are `[B, H, Tk, dh]`, `bias` broadcasts
/// against `[B, H, Tq, Tk]`.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let consistent = sq.len() == 4
        && sk.len() == 4
        && sv == sk
        && sq[0] == sk[0]
        && sq[1] == sk[1]
        && sq[3] == sk[3];
    if !consistent {
        return Err(ModelError::Shape(format!("attention q {sq:?}, k {sk:?}, v {sv:?}")));
    }
    if let Some(m) = mask {
        if (m.batch, m.q_len, m.k_len) != (sq[0], sq[2], sk[2]) {
            return Err(ModelError::Shape(format!(
                "mask [{}, {}, {}] for scores [{}, _, {}, {}]",
                m.batch, m.q_len, m.k_len, sq[0], sq[2], sk[2]
            )));
        }
    }
    if sk[2] == 0 {
        return Err(ModelError::EmptyAttention { batch: 0, query: 0 });
    }
    let scores = tape.matmul_t(q, k, false, true)?;
    let mut scores = tape.scale(scores, S::of(1.0 / (sq[3] as f64).sqrt()))?;
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    if let Some(m) = mask {
        let penalty = tape.constant(m.penalty()?);
        scores = tape.add(scores, penalty)?;
    }
    let probs = tape.softmax(scores, 3)?;
    Ok(tape.matmul(probs, v)?)
}

/// Right-padded id rows of equal length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        }
        TokenBatch { batch: rows.len(), len, ids }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    fn as_indices(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// Dropout configuration for one forward pass. Each dropout site draws a
/// fresh seed from `seed` and a running counter.
#[derive(Clone, Debug)]
pub struct ForwardMode {
    pub dropout_rate: f64,
    pub seed: u64,
    counter: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode { dropout_rate: 0.0, seed: 0, counter: 0 }
    }

    pub fn train(dropout_rate: f64, seed: u64) -> Self {
        ForwardMode { dropout_rate, seed, counter: 0 }
    }

    fn apply<S: Scalar>(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if self.dropout_rate == 0.0 {
            return Ok(x);
        }
        self.counter += 1;
        let site_seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.counter);
        Ok(tape.dropout(x, self.dropout_rate, site_seed)?)
    }
}

/// Parameters pushed onto a tape, in canonical order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Use existing tape variables as the parameters, in canonical order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<S> {
    pub config: ModelConfig,
    pub params: Parameters<S>,
}

/// Source, shifted decoder input and targets of one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqBatch {
    pub src: TokenBatch,
    pub tgt_in: TokenBatch,
    pub tgt_out: TokenBatch,
}

impl<S: Scalar> Transformer<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Ok(Transformer { config, params })
    }

    pub fn from_parameters(config: ModelConfig, params: Parameters<S>) -> Result<Self> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(ModelError::Config("parameter names or shapes do not match the config".into()));
        }
        Ok(Transformer { config, params })
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect() }
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.params.position(name).map(|i| bound.vars[i]).ok_or_else(|| ModelError::MissingParameter(name.into()))
    }

    fn check_ids(&self, batch: &TokenBatch) -> Result<()> {
        if let Some((position, &id)) = batch.ids.iter().enumerate().find(|(_, &id)| id as usize >= self.config.vocab_size) {
            return Err(TensorError::IndexOutOfRange {
                what: "token id",
                index: id as usize,
                bound: self.config.vocab_size,
                position,
            }
            .into());
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape<S>, bound: &Bound, batch: &TokenBatch) -> Result<Var> {
        let table = self.var(bound, "shared.embedding")?;
        let rows = tape.embedding(table, &batch.as_indices())?;
        Ok(tape.reshape(rows, &[batch.batch, batch.len, self.config.d_model])?)
    }

    /// `[B, T, d] → [B, H, T, dh]` after projecting with `w`.
    fn heads(&self, tape: &mut Tape<S>, x: Var, w: Var) -> Result<Var> {
        let (b, t) = (tape.shape(x)[0], tape.shape(x)[1]);
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, &[b, t, self.config.n_heads, self.config.d_head()])?;
        Ok(tape.permute(y, &[0, 2, 1, 3])?)
    }

    fn merge_heads(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let (b, t) = (tape.shape(x)[0], tape.shape(x)[2]);
        let y = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(y, &[b, t, self.config.d_model])?)
    }

    /// Relative-position bias `[H, |queries|, k_len]`.
    fn position_bias(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        table: &str,
        queries: &[usize],
        k_len: usize,
        bidirectional: bool,
    ) -> Result<Var> {
        let table = self.var(bound, table)?;
        let (nb, md) = (self.config.n_relative_buckets, self.config.max_relative_distance);
        let ids: Vec<usize> = queries
            .iter()
            .flat_map(|&q| (0..k_len).map(move |k| relative_bucket(k as i64 - q as i64, bidirectional, nb, md)))
            .collect();
        let rows = tape.embedding(table, &ids)?;
        let rows = tape.reshape(rows, &[queries.len(), k_len, self.config.n_heads])?;
        Ok(tape.permute(rows, &[2, 0, 1])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        prefix: &str,
        x: Var,
        kv: Var,
        bias: Option<Var>,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let q = self.heads(tape, x, self.var(bound, &format!("{prefix}.q"))?)?;
        let k = self.heads(tape, kv, self.var(bound, &format!("{prefix}.k"))?)?;
        let v = self.heads(tape, kv, self.var(bound, &format!("{prefix}.v"))?)?;
        let ctx = attention(tape, q, k, v, bias, mask)?;
        let merged = self.merge_heads(tape, ctx)?;
        Ok(tape.matmul(merged, self.var(bound, &format!("{prefix}.o"))?)?)
    }

    fn ffn(&self, tape: &mut Tape<S>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.var(bound, &format!("{prefix}.w1"))?)?;
        let h = tape.gelu(h)?;
        Ok(tape.matmul(h, self.var(bound, &format!("{prefix}.w2"))?)?)
    }

    fn norm(&self, tape: &mut Tape<S>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        Ok(tape.rms_norm(x, self.var(bound, name)?, S::of(RMS_EPS))?)
    }

    /// Encoder memory `[B, Ts, d_model]`; PAD source positions are masked
    /// out of attention.
    pub fn encode(&self, tape: &mut Tape<S>, bound: &Bound, src: &TokenBatch, mode: &mut ForwardMode) -> Result<Var> {
        self.check_ids(src)?;
        let mut x = self.embed(tape, bound, src)?;
        x = mode.apply(tape, x)?;
        let positions: Vec<usize> = (0..src.len).collect();
        let bias = self.position_bias(tape, bound, "encoder.relative_bias", &positions, src.len, true)?;
        let mask = AttnMask::key_padding(src, src.len);
        for i in 0..self.config.n_encoder_layers {
            let p = format!("encoder.layers.{i}");
            let h = self.norm(tape, bound, &format!("{p}.attn_norm"), x)?;
            let a = self.attention_block(tape, bound, &format!("{p}.attn"), h, h, Some(bias), Some(&mask))?;
            let a = mode.apply(tape, a)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, bound, &format!("{p}.ffn_norm"), x)?;
            let f = self.ffn(tape, bound, &format!("{p}.ffn"), h)?;
            let f = mode.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        let x = self.norm(tape, bound, "encoder.final_norm", x)?;
        mode.apply(tape, x)
    }

    /// Teacher-forced logits `[B, Tt, V]` for decoder input `tgt_in`.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        memory: Var,
        src: &TokenBatch,
        tgt_in: &TokenBatch,
        mode: &mut ForwardMode,
    ) -> Result<Var> {
        self.check_ids(tgt_in)?;
        if tgt_in.batch != src.batch {
            return Err(ModelError::Shape(format!("{} source rows but {} target rows", src.batch, tgt_in.batch)));
        }
        let mut y = self.embed(tape, bound, tgt_in)?;
        y = mode.apply(tape, y)?;
        let positions: Vec<usize> = (0..tgt_in.len).collect();
        let bias = self.position_bias(tape, bound, "decoder.relative_bias", &positions, tgt_in.len, false)?;
        let causal = AttnMask::causal(tgt_in.batch, tgt_in.len);
        let cross = AttnMask::key_padding(src, tgt_in.len);
        for i in 0..self.config.n_decoder_layers {
            let p = format!("decoder.layers.{i}");
            let h = self.norm(tape, bound, &format!("{p}.self_norm"), y)?;
            let a = self.attention_block(tape, bound, &format!("{p}.self_attn"), h, h, Some(bias), Some(&causal))?;
            let a = mode.apply(tape, a)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, bound, &format!("{p}.cross_norm"), y)?;
            let c = self.attention_block(tape, bound, &format!("{p}.cross_attn"), h, memory, None, Some(&cross))?;
            let c = mode.apply(tape, c)?;
            y = tape.add(y, c)?;
            let h = self.norm(tape, bound, &format!("{p}.ffn_norm"), y)?;
            let f = self.ffn(tape, bound, &format!("{p}.ffn"), h)?;
            let f = mode.apply(tape, f)?;
            y = tape.add(y, f)?;
        }
        let y = self.norm(tape, bound, "decoder.final_norm", y)?;
        let y = mode.apply(tape, y)?;
        let table = self.var(bound, "shared.embedding")?;
        Ok(tape.matmul_t(y, table, false, true)?)
    }

    /// Mean token cross-entropy over non-PAD targets, optionally weighted per
    /// example.
    pub fn loss(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        batch: &Seq2SeqBatch,
        example_weights: Option<&[S]>,
        mode: &mut ForwardMode,
    ) -> Result<Var> {
        let memory = self.encode(tape, bound, &batch.src, mode)?;
        let logits = self.decode_logits(tape, bound, memory, &batch.src, &batch.tgt_in, mode)?;
        let v = self.config.vocab_size;
        let flat = tape.reshape(logits, &[batch.tgt_out.batch * batch.tgt_out.len, v])?;
        let targets = batch.tgt_out.as_indices();
        let weights: Option<Vec<S>> = example_weights.map(|w| {
            (0..batch.tgt_out.batch).flat_map(|b| std::iter::repeat_n(w[b], batch.tgt_out.len)).collect()
        });
        Ok(tape.weighted_cross_entropy(flat, &targets, PAD as usize, weights.as_deref())?)
    }

    /// Teacher-forced logits without gradients.
    pub fn logits(&self, src: &TokenBatch, tgt_in: &TokenBatch) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut mode = ForwardMode::eval();
        let memory = self.encode(&mut tape, &bound, src, &mut mode)?;
        let logits = self.decode_logits(&mut tape, &bound, memory, src, tgt_in, &mut mode)?;
        Ok(tape.value(logits).clone())
    }

    /// Start incremental decoding for the given (unpadded) source rows.
    pub fn start_decoding(&self, sources: &[Vec<u32>]) -> Result<IncrementalDecoder<'_, S>> {
        IncrementalDecoder::new(self, sources)
    }
}

/// Decoder state for one token at a time generation, caching self-attention
/// keys/values and the projected encoder memory.
pub struct IncrementalDecoder<'m, S: Scalar> {
    model: &'m Transformer<S>,
    tape: Tape<S>,
    bound: Bound,
    rows: usize,
    src_keep: Vec<Vec<bool>>,
    cross_kv: Vec<(Tensor<S>, Tensor<S>)>,
    self_kv: Vec<Option<(Tensor<S>, Tensor<S>)>>,
    position: usize,
}

impl<'m, S: Scalar> IncrementalDecoder<'m, S> {
    fn new(model: &'m Transformer<S>, sources: &[Vec<u32>]) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let src = TokenBatch::from_rows(sources);
        let memory = model.encode(&mut tape, &bound, &src, &mut ForwardMode::eval())?;
        let mut cross_kv = Vec::with_capacity(model.config.n_decoder_layers);
        for i in 0..model.config.n_decoder_layers {
            let p = format!("decoder.layers.{i}.cross_attn");
            let k = model.heads(&mut tape, memory, model.var(&bound, &format!("{p}.k"))?)?;
            let v = model.heads(&mut tape, memory, model.var(&bound, &format!("{p}.v"))?)?;
            cross_kv.push((tape.value(k).clone(), tape.value(v).clone()));
        }
        let src_keep = (0..src.batch).map(|b| src.row(b).iter().map(|&id| id != PAD).collect()).collect();
        Ok(IncrementalDecoder {
            model,
            tape,
            bound,
            rows: src.batch,
            src_keep,
            cross_kv,
            self_kv: vec![None; model.config.n_decoder_layers],
            position: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Feed one token per row and return next-token logits `[rows, V]`.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Tensor<S>> {
        let model = self.model;
        if tokens.len() != self.rows {
            return Err(ModelError::Shape(format!("{} tokens for {} rows", tokens.len(), self.rows)));
        }
        let tape = &mut self.tape;
        let bound = &self.bound;
        let batch = TokenBatch { batch: self.rows, len: 1, ids: tokens.to_vec() };
        model.check_ids(&batch)?;
        let t = self.position;
        let mut y = model.embed(tape, bound, &batch)?;
        let bias = model.position_bias(tape, bound, "decoder.relative_bias", &[t], t + 1, false)?;
        let src_len = self.src_keep.first().map_or(0, Vec::len);
        let cross = AttnMask::new(self.rows, 1, src_len, self.src_keep.concat())?;
        for i in 0..model.config.n_decoder_layers {
            let p = format!("decoder.layers.{i}");
            let h = model.norm(tape, bound, &format!("{p}.self_norm"), y)?;
            let q = model.heads(tape, h, model.var(bound, &format!("{p}.self_attn.q"))?)?;
            let k_new = model.heads(tape, h, model.var(bound, &format!("{p}.self_attn.k"))?)?;
            let v_new = model.heads(tape, h, model.var(bound, &format!("{p}.self_attn.v"))?)?;
            let (k_all, v_all) = match self.self_kv[i].take() {
                None => (tape.value(k_new).clone(), tape.value(v_new).clone()),
                Some((k, v)) => (
                    Tensor::concat(&[&k, tape.value(k_new)], 2)?,
                    Tensor::concat(&[&v, tape.value(v_new)], 2)?,
                ),
            };
            let k = tape.constant(k_all.clone());
            let v = tape.constant(v_all.clone());
            self.self_kv[i] = Some((k_all, v_all));
            let ctx = attention(tape, q, k, v, Some(bias), None)?;
            let merged = model.merge_heads(tape, ctx)?;
            let a = tape.matmul(merged, model.var(bound, &format!("{p}.self_attn.o"))?)?;
            y = tape.add(y, a)?;

            let h = model.norm(tape, bound, &format!("{p}.cross_norm"), y)?;
            let q = model.heads(tape, h, model.var(bound, &format!("{p}.cross_attn.q"))?)?;
            let k = tape.constant(self.cross_kv[i].0.clone());
            let v = tape.constant(self.cross_kv[i].1.clone());
            let ctx = attention(tape, q, k, v, None, Some(&cross))?;
            let merged = model.merge_heads(tape, ctx)?;
            let c = tape.matmul(merged, model.var(bound, &format!("{p}.cross_attn.o"))?)?;
            y = tape.add(y, c)?;

            let h = model.norm(tape, bound, &format!("{p}.ffn_norm"), y)?;
            let f = model.ffn(tape, bound, &format!("{p}.ffn"), h)?;
            y = tape.add(y, f)?;
        }
        let y = model.norm(tape, bound, "decoder.final_norm", y)?;
        let table = model.var(bound, "shared.embedding")?;
        let logits = tape.matmul_t(y, table, false, true)?;
        self.position += 1;
        let out = tape.value(logits).clone().reshape(vec![self.rows, model.config.vocab_size])?;
        self.compact();
        Ok(out)
    }

    /// Keep only rows `indices` (in order, duplicates allowed).
    pub fn reorder(&mut self, indices: &[usize]) -> Result<()> {
        for (k, v) in &mut self.cross_kv {
            *k = k.select_rows(indices)?;
            *v = v.select_rows(indices)?;
        }
        for (k, v) in self.self_kv.iter_mut().flatten() {
            *k = k.select_rows(indices)?;
            *v = v.select_rows(indices)?;
        }
        self.src_keep = indices.iter().map(|&i| self.src_keep[i].clone()).collect();
        self.rows = indices.len();
        Ok(())
    }

    /// Drop per-step nodes so the tape only holds the bound parameters.
    fn compact(&mut self) {
        let keep = self.bound.vars.len();
        self.tape.truncate(keep);
    }
}
