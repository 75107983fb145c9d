//! Code tokenization, corpus BLEU, exact-match accuracy and fold
//! aggregation.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::decode::{self, DecodeError};
use crate::model::Transformer;
use crate::tensor::Scalar;
use crate::tokenizer::{TokenizerError, Vocabulary};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("BLEU over an empty set of pairs")]
    EmptyCorpus,
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("generator returned {got} outputs for {expected} inputs")]
    OutputCount { expected: usize, got: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Split code into identifier/number runs and single punctuation characters.
pub fn tokenize_code(snippet: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in snippet.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn exact_match(hypothesis: &str, reference: &str) -> bool {
    tokenize_code(hypothesis) == tokenize_code(reference)
}

/// Clipped n-gram matches and hypothesis n-gram totals per order, plus
/// lengths. Adds up across sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl NgramStats {
    pub fn new(max_n: usize) -> Self {
        NgramStats { matches: vec![0; max_n], totals: vec![0; max_n], hyp_len: 0, ref_len: 0 }
    }

    pub fn sentence<T: AsRef<str>>(hypothesis: &[T], reference: &[T], max_n: usize) -> Self {
        let hyp: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
        let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        let mut stats = NgramStats::new(max_n);
        stats.hyp_len = hyp.len() as u64;
        stats.ref_len = reference.len() as u64;
        for n in 1..=max_n {
            let ref_counts = ngram_counts(&reference, n);
            let hyp_counts = ngram_counts(&hyp, n);
            stats.totals[n - 1] = hyp_counts.values().sum();
            stats.matches[n - 1] =
                hyp_counts.iter().map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0))).sum();
        }
        stats
    }

    pub fn add(&mut self, other: &NgramStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in `[0, 100]`.
    ///
    /// A zero precision at order n becomes `1 / (2 · totalₙ)`. Orders with no
    /// hypothesis n-grams at all are left out of the geometric mean, and an
    /// empty hypothesis side scores 0.
    pub fn bleu(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if t == 0 {
                continue;
            }
            let p = if m == 0 { 1.0 / (2.0 * t as f64) } else { m as f64 / t as f64 };
            log_sum += p.ln();
            orders += 1;
        }
        let (h, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if h >= r { 1.0 } else { (1.0 - r / h).exp() };
        (bp * (log_sum / orders as f64).exp() * 100.0).clamp(0.0, 100.0)
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over `(hypothesis, reference)` token lists.
pub fn corpus_bleu<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<T>)], max_n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut total = NgramStats::new(max_n);
    for (h, r) in pairs {
        total.add(&NgramStats::sentence(h, r, max_n));
    }
    Ok(total.bleu())
}

/// Produces one snippet per intent.
pub trait Generator {
    fn generate(&mut self, intents: &[&str]) -> Result<Vec<String>>;
}

/// Greedy decoding with a trained model.
pub struct GreedyGenerator<'a, S: Scalar> {
    pub model: &'a Transformer<S>,
    pub vocab: &'a Vocabulary,
    pub max_src_len: usize,
    pub max_len: usize,
    pub batch_size: usize,
}

impl<S: Scalar> Generator for GreedyGenerator<'_, S> {
    fn generate(&mut self, intents: &[&str]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(intents.len());
        for chunk in intents.chunks(self.batch_size.max(1)) {
            let sources = chunk
                .iter()
                .map(|t| Ok(self.vocab.encode(t, self.max_src_len, true)?.ids))
                .collect::<Result<Vec<_>>>()?;
            for hyp in decode::greedy(self.model, &sources, self.max_len)? {
                out.push(self.vocab.decode(hyp.content())?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: u64,
    pub hypothesis: String,
    pub reference: String,
    pub exact_match: bool,
    pub stats: NgramStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub accuracy: f64,
    pub n_examples: usize,
    pub fold_id: Option<usize>,
    pub totals: NgramStats,
    pub per_example: Vec<ExampleResult>,
}

impl EvalReport {
    pub fn from_outputs(examples: &[Example], hypotheses: &[String]) -> Result<Self> {
        if examples.is_empty() {
            return Err(EvalError::Empty("dataset"));
        }
        if hypotheses.len() != examples.len() {
            return Err(EvalError::OutputCount { expected: examples.len(), got: hypotheses.len() });
        }
        let mut totals = NgramStats::new(MAX_ORDER);
        let mut matches = 0;
        let per_example: Vec<ExampleResult> = examples
            .iter()
            .zip(hypotheses)
            .map(|(ex, hyp)| {
                let (h, r) = (tokenize_code(hyp), tokenize_code(&ex.snippet));
                let stats = NgramStats::sentence(&h, &r, MAX_ORDER);
                totals.add(&stats);
                let exact = h == r;
                matches += exact as usize;
                ExampleResult {
                    id: ex.id,
                    hypothesis: hyp.clone(),
                    reference: ex.snippet.clone(),
                    exact_match: exact,
                    stats,
                }
            })
            .collect();
        Ok(EvalReport {
            bleu: totals.bleu(),
            accuracy: 100.0 * matches as f64 / examples.len() as f64,
            n_examples: examples.len(),
            fold_id: None,
            totals,
            per_example,
        })
    }

    /// BLEU recomputed from the per-example statistics.
    pub fn recomputed_bleu(&self) -> f64 {
        let mut totals = NgramStats::new(MAX_ORDER);
        for ex in &self.per_example {
            totals.add(&ex.stats);
        }
        totals.bleu()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|source| EvalError::Io { path: path.display().to_string(), source })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "exact_match".into(), "hyp_len".into(), "ref_len".into()];
        for n in 1..=MAX_ORDER {
            header.push(format!("match_{n}"));
            header.push(format!("total_{n}"));
        }
        header.push("hypothesis".into());
        header.push("reference".into());
        w.write_record(&header)?;
        for ex in &self.per_example {
            let mut row = vec![
                ex.id.to_string(),
                ex.exact_match.to_string(),
                ex.stats.hyp_len.to_string(),
                ex.stats.ref_len.to_string(),
            ];
            for (m, t) in ex.stats.matches.iter().zip(&ex.stats.totals) {
                row.push(m.to_string());
                row.push(t.to_string());
            }
            row.push(ex.hypothesis.clone());
            row.push(ex.reference.clone());
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| EvalError::Io { path: "csv output".into(), source })?;
        Ok(())
    }
}

/// Generate for every example and score against its snippet.
pub fn evaluate<G: Generator + ?Sized>(generator: &mut G, dataset: &[Example]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(EvalError::Empty("dataset"));
    }
    let intents: Vec<&str> = dataset.iter().map(|e| e.intent.as_str()).collect();
    let hypotheses = generator.generate(&intents)?;
    EvalReport::from_outputs(dataset, &hypotheses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub bleu: f64,
    pub accuracy: f64,
    pub n_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean_bleu: f64,
    pub mean_accuracy: f64,
    pub folds: Vec<FoldRow>,
}

/// Unweighted mean over folds.
pub fn aggregate_folds(reports: &[EvalReport]) -> Result<FoldSummary> {
    if reports.is_empty() {
        return Err(EvalError::Empty("fold reports"));
    }
    let folds: Vec<FoldRow> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| FoldRow {
            fold: r.fold_id.unwrap_or(i),
            bleu: r.bleu,
            accuracy: r.accuracy,
            n_examples: r.n_examples,
        })
        .collect();
    let k = folds.len() as f64;
    Ok(FoldSummary {
        mean_bleu: folds.iter().map(|f| f.bleu).sum::<f64>() / k,
        mean_accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / k,
        folds,
    })
}
