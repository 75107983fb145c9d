//! Dataset loading, dev-set carving and cross-validation planning.
//!
//! Three on-disk families are understood:
//! - gold: a JSON array of `{intent, rewritten_intent, snippet}` records;
//! - noisy (mined): JSON lines of `{intent, snippet, prob}`, streamed;
//! - nl2lf: JSON lines of `{intent, snippet}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {message}{}", .offset.map(|o| format!(" (byte offset {o})")).unwrap_or_default())]
    Load { path: String, offset: Option<usize>, message: String },
    #[error("{path}: record {record}: {message}")]
    Validation { path: String, record: usize, message: String },
    #[error("{0}")]
    Parameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gold,
    Noisy,
    Nl2lf,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Gold => "gold",
            Source::Noisy => "noisy",
            Source::Nl2lf => "nl2lf",
        }
    }
}

/// One natural-language intent paired with its code snippet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub intent: String,
    pub snippet: String,
    pub source: Source,
    /// Confidence of mined pairs; always 1.0 for gold and nl2lf.
    pub weight: f64,
}

impl Example {
    pub fn new(id: u64, intent: impl Into<String>, snippet: impl Into<String>, source: Source, weight: f64) -> Result<Self, String> {
        let (intent, snippet) = (intent.into(), snippet.into());
        if intent.trim().is_empty() {
            return Err("intent is empty".into());
        }
        if snippet.trim().is_empty() {
            return Err("snippet is empty".into());
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(format!("weight {weight} outside [0, 1]"));
        }
        if source != Source::Noisy && weight != 1.0 {
            return Err(format!("{} examples must have weight 1.0", source.as_str()));
        }
        Ok(Example { id, intent, snippet, source, weight })
    }
}

/// Counts reported after a load; serialised as the load summary JSON.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub loaded: usize,
    pub skipped: usize,
    /// Well-formed records dropped by a weight threshold.
    #[serde(default)]
    pub filtered: usize,
    pub source: String,
    pub path: String,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Load { path: path.display().to_string(), offset: None, message: e.to_string() }
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    line_start + column.saturating_sub(1)
}

fn field_str<'a>(record: &'a Value, name: &str) -> Option<&'a str> {
    record.get(name).and_then(Value::as_str)
}

/// Load the gold benchmark array. `rewritten_intent` wins over `intent`
/// whenever it is present and non-null.
pub fn load_gold(path: &Path) -> Result<Vec<Example>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let parsed: Value = serde_json::from_str(&text).map_err(|e| CorpusError::Load {
        path: path.display().to_string(),
        offset: Some(byte_offset(&text, e.line(), e.column())),
        message: e.to_string(),
    })?;
    let records = parsed.as_array().ok_or_else(|| CorpusError::Load {
        path: path.display().to_string(),
        offset: Some(0),
        message: "expected a JSON array of records".into(),
    })?;
    let invalid = |record: usize, message: String| CorpusError::Validation { path: path.display().to_string(), record, message };
    records
        .iter()
        .enumerate()
        .map(|(i, record)| {
            let snippet = field_str(record, "snippet").ok_or_else(|| invalid(i, "missing string field `snippet`".into()))?;
            let intent = match record.get("rewritten_intent") {
                Some(Value::String(s)) => s.as_str(),
                Some(Value::Null) | None => {
                    field_str(record, "intent").ok_or_else(|| invalid(i, "missing string field `intent`".into()))?
                }
                Some(_) => return Err(invalid(i, "`rewritten_intent` must be a string or null".into())),
            };
            Example::new(i as u64, intent, snippet, Source::Gold, 1.0).map_err(|m| invalid(i, m))
        })
        .collect()
}

#[derive(Deserialize)]
struct LineRecord {
    intent: String,
    snippet: String,
    prob: Option<f64>,
}

/// Load the hand-assembled JSON-lines dataset. Blank lines are ignored.
pub fn load_nl2lf(path: &Path) -> Result<Vec<Example>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let record = out.len();
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Load {
            path: path.display().to_string(),
            offset: Some(start + e.column().saturating_sub(1)),
            message: format!("record {record}: {e}"),
        })?;
        let invalid = |message: &str| CorpusError::Validation { path: path.display().to_string(), record, message: message.into() };
        let intent = field_str(&value, "intent").ok_or_else(|| invalid("missing string field `intent`"))?;
        let snippet = field_str(&value, "snippet").ok_or_else(|| invalid("missing string field `snippet`"))?;
        out.push(Example::new(record as u64, intent, snippet, Source::Nl2lf, 1.0).map_err(|m| invalid(&m))?);
    }
    Ok(out)
}

/// Streaming reader over the mined JSON-lines file.
///
/// Malformed lines are skipped and counted; memory use does not depend on
/// file size.
pub struct NoisyStream<R> {
    lines: std::io::Lines<R>,
    min_weight: f64,
    next_id: u64,
    summary: LoadSummary,
}

pub fn load_noisy(path: &Path, min_weight: f64) -> Result<NoisyStream<BufReader<File>>, CorpusError> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    Ok(NoisyStream::new(BufReader::new(file), min_weight, path))
}

impl<R: BufRead> NoisyStream<R> {
    pub fn new(reader: R, min_weight: f64, path: &Path) -> Self {
        NoisyStream {
            lines: reader.lines(),
            min_weight,
            next_id: 0,
            summary: LoadSummary { source: Source::Noisy.as_str().into(), path: path.display().to_string(), ..Default::default() },
        }
    }

    pub fn summary(&self) -> &LoadSummary {
        &self.summary
    }

    fn parse(&self, line: &str) -> Option<Example> {
        let record: LineRecord = serde_json::from_str(line).ok()?;
        Example::new(self.next_id, record.intent, record.snippet, Source::Noisy, record.prob?).ok()
    }
}

impl<R: BufRead> Iterator for NoisyStream<R> {
    type Item = Example;

    fn next(&mut self) -> Option<Example> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(_) => {
                    self.summary.skipped += 1;
                    continue;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = self.parse(&line);
            self.next_id += 1;
            match parsed {
                None => self.summary.skipped += 1,
                Some(ex) if ex.weight < self.min_weight => self.summary.filtered += 1,
                Some(ex) => {
                    self.summary.loaded += 1;
                    return Some(ex);
                }
            }
        }
    }
}

pub fn summarize(examples: &[Example], source: Source, path: &Path) -> LoadSummary {
    LoadSummary { loaded: examples.len(), source: source.as_str().into(), path: path.display().to_string(), ..Default::default() }
}

/// Write examples in the on-disk format of their family.
pub fn write_examples(path: &Path, examples: &[Example], source: Source) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    match source {
        Source::Gold => {
            let records: Vec<Value> = examples
                .iter()
                .map(|e| serde_json::json!({"intent": e.intent, "rewritten_intent": Value::Null, "snippet": e.snippet}))
                .collect();
            serde_json::to_writer_pretty(&mut out, &records)?;
            writeln!(out)?;
        }
        Source::Noisy => {
            for e in examples {
                writeln!(out, "{}", serde_json::json!({"intent": e.intent, "snippet": e.snippet, "prob": e.weight}))?;
            }
        }
        Source::Nl2lf => {
            for e in examples {
                writeln!(out, "{}", serde_json::json!({"intent": e.intent, "snippet": e.snippet}))?;
            }
        }
    }
    out.flush()
}

/// Fisher–Yates shuffle driven by ChaCha8 seeded through `seed_from_u64`.
///
/// For `i` from the end down to 1, the swap index is
/// `(next_u64() as u128 * (i + 1)) >> 64`.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        items.swap(i, j);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub dev: Vec<u64>,
    pub test: Vec<u64>,
}

/// Move `dev_size` seeded-random examples out of `train`. Remaining training
/// ids keep their input order.
pub fn carve_dev(train: &[Example], dev_size: usize, seed: u64) -> Result<DatasetSplit, CorpusError> {
    if dev_size >= train.len() && dev_size > 0 {
        return Err(CorpusError::Parameter(format!(
            "dev_size {dev_size} must be smaller than the training set ({} examples)",
            train.len()
        )));
    }
    let mut ids: Vec<u64> = train.iter().map(|e| e.id).collect();
    seeded_shuffle(&mut ids, seed);
    let dev = ids.split_off(ids.len() - dev_size);
    let held: std::collections::HashSet<u64> = dev.iter().copied().collect();
    let train = train.iter().map(|e| e.id).filter(|id| !held.contains(id)).collect();
    Ok(DatasetSplit { train, dev, test: Vec::new() })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    pub fold_count: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Repeated random sub-sampling: fold `i` shuffles with `seed + i` and keeps
/// the first `round(train_fraction · N)` ids for training.
pub fn plan_folds(data: &[Example], fold_count: usize, train_fraction: f64, seed: u64) -> Result<FoldPlan, CorpusError> {
    if fold_count == 0 {
        return Err(CorpusError::Parameter("fold_count must be at least 1".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::Parameter(format!("train_fraction {train_fraction} must lie strictly between 0 and 1")));
    }
    let n_train = (train_fraction * data.len() as f64).round() as usize;
    let folds = (0..fold_count)
        .map(|i| {
            let mut ids: Vec<u64> = data.iter().map(|e| e.id).collect();
            seeded_shuffle(&mut ids, seed.wrapping_add(i as u64));
            let test = ids.split_off(n_train);
            Fold { train: ids, test }
        })
        .collect();
    Ok(FoldPlan { folds, fold_count, train_fraction, seed })
}

/// Examples with the given ids, in id-list order.
pub fn select(examples: &[Example], ids: &[u64]) -> Result<Vec<Example>, CorpusError> {
    let index: HashMap<u64, &Example> = examples.iter().map(|e| (e.id, e)).collect();
    ids.iter()
        .map(|id| index.get(id).map(|e| (*e).clone()).ok_or_else(|| CorpusError::Parameter(format!("unknown example id {id}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Cursor;
    use std::path::PathBuf;

    fn examples(n: usize) -> Vec<Example> {
        (0..n).map(|i| Example::new(i as u64, format!("intent {i}"), format!("x = {i}"), Source::Nl2lf, 1.0).unwrap()).collect()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn gold_loads_in_order_with_rewritten_preference() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "gold.json",
            r#"[{"intent":"a","rewritten_intent":null,"snippet":"b=1"},
                {"intent":"raw","rewritten_intent":"clean","snippet":"c()"},
                {"intent":"only","snippet":"d"}]"#,
        );
        let ex = load_gold(&p).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].intent, "a");
        assert_eq!(ex[1].intent, "clean");
        assert_eq!(ex[2].intent, "only");
        assert!(ex.iter().all(|e| e.source == Source::Gold && e.weight == 1.0));
        assert_eq!(ex.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn gold_errors_name_path_offset_and_record() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let err = load_gold(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.json"));

        let p = write(&dir, "bad.json", "[{\"intent\": \"a\",\n \"snippet\": }]");
        match load_gold(&p).unwrap_err() {
            CorpusError::Load { offset: Some(o), path, .. } => {
                assert!(path.ends_with("bad.json"));
                assert_eq!(&"[{\"intent\": \"a\",\n \"snippet\": }]"[o..o + 1], "}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let p = write(&dir, "nosnip.json", r#"[{"intent":"a","snippet":"x"},{"intent":"b"}]"#);
        match load_gold(&p).unwrap_err() {
            CorpusError::Validation { record, .. } => assert_eq!(record, 1),
            other => panic!("unexpected {other:?}"),
        }

        let p = write(&dir, "blank.json", r#"[{"intent":"  ","snippet":"x"}]"#);
        assert!(matches!(load_gold(&p), Err(CorpusError::Validation { record: 0, .. })));
    }

    #[test]
    fn noisy_stream_filters_and_counts() {
        let body = r#"{"intent":"a","snippet":"x","prob":0.9}
{"intent":"b","snippet":"y","prob":0.2}
not json
{"intent":"c","snippet":"z"}
{"intent":"d","snippet":"w","prob":1.0}

{"intent":"e","snippet":"v","prob":1.5}
"#;
        let all: Vec<_> = NoisyStream::new(Cursor::new(body), 0.0, Path::new("m.jsonl")).collect();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|e| e.source == Source::Noisy));
        assert_eq!(all[0].weight, 0.9);

        let mut s = NoisyStream::new(Cursor::new(body), 0.0, Path::new("m.jsonl"));
        s.by_ref().for_each(drop);
        let summary = s.summary().clone();
        assert_eq!((summary.loaded, summary.skipped, summary.filtered), (3, 3, 0));
        // loaded + skipped = non-blank records
        assert_eq!(summary.loaded + summary.skipped, 6);

        let mut s = NoisyStream::new(Cursor::new(body), 0.5, Path::new("m.jsonl"));
        assert_eq!(s.by_ref().count(), 2);
        assert_eq!(s.summary().filtered, 1);

        assert_eq!(NoisyStream::new(Cursor::new(body), 1.1, Path::new("m.jsonl")).count(), 0);
        let json = serde_json::to_value(&summary).unwrap();
        assert_eq!(json["source"], "noisy");
        assert_eq!(json["path"], "m.jsonl");
    }

    #[test]
    fn nl2lf_keeps_each_description() {
        let dir = tempfile::tempdir().unwrap();
        let snippet = "@labeling_function()\\ndef lf(x):\\n    return SPAM";
        let body = format!(
            "{{\"intent\":\"flag spam\",\"snippet\":\"{snippet}\"}}\n{{\"intent\":\"mark as spam\",\"snippet\":\"{snippet}\"}}\n"
        );
        let p = write(&dir, "lf.jsonl", &body);
        let ex = load_nl2lf(&p).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].snippet, ex[1].snippet);
        assert!(ex[0].snippet.contains('\n'));
        assert_eq!(ex[1].id, 1);

        let p = write(&dir, "empty.jsonl", "");
        assert!(load_nl2lf(&p).unwrap().is_empty());

        let p = write(&dir, "broken.jsonl", "{\"intent\":\"a\",\"snippet\":\"b\"}\n{oops}\n");
        match load_nl2lf(&p).unwrap_err() {
            CorpusError::Load { offset: Some(o), message, .. } => {
                assert!(o >= 28, "offset {o} points into the second line");
                assert!(message.contains("record 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_load_each_family() {
        let dir = tempfile::tempdir().unwrap();
        let ex = examples(4);
        let p = dir.path().join("g.json");
        let gold: Vec<Example> = ex.iter().map(|e| Example { source: Source::Gold, ..e.clone() }).collect();
        write_examples(&p, &gold, Source::Gold).unwrap();
        assert_eq!(load_gold(&p).unwrap(), gold);

        let p = dir.path().join("n.jsonl");
        write_examples(&p, &ex, Source::Nl2lf).unwrap();
        assert_eq!(load_nl2lf(&p).unwrap(), ex);
    }

    #[test]
    fn example_invariants() {
        assert!(Example::new(0, "a", "b", Source::Gold, 0.5).is_err());
        assert!(Example::new(0, "a", "b", Source::Noisy, 0.5).is_ok());
        assert!(Example::new(0, "a", "", Source::Noisy, 0.5).is_err());
        assert!(Example::new(0, "a", "b", Source::Noisy, -0.1).is_err());
    }

    #[test]
    fn carve_dev_sizes_and_determinism() {
        let data = examples(2379);
        let split = carve_dev(&data, 200, 7).unwrap();
        assert_eq!(split.train.len(), 2179);
        assert_eq!(split.dev.len(), 200);
        let dev: HashSet<_> = split.dev.iter().collect();
        assert!(split.train.iter().all(|id| !dev.contains(id)));
        assert_eq!(carve_dev(&data, 200, 7).unwrap(), split);
        assert_ne!(carve_dev(&data, 200, 8).unwrap(), split);

        let none = carve_dev(&data[..10], 0, 1).unwrap();
        assert!(none.dev.is_empty());
        assert_eq!(none.train, (0..10).collect::<Vec<u64>>());

        assert!(matches!(carve_dev(&data[..10], 10, 1), Err(CorpusError::Parameter(_))));
    }

    #[test]
    fn fold_plan_rounding_and_disjointness() {
        let data = examples(193);
        let plan = plan_folds(&data, 5, 0.5, 3).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for fold in &plan.folds {
            assert_eq!(fold.train.len(), 97);
            assert_eq!(fold.test.len(), 96);
            let train: HashSet<_> = fold.train.iter().collect();
            assert!(fold.test.iter().all(|id| !train.contains(id)));
        }
        assert_ne!(plan.folds[0], plan.folds[1]);
        assert_eq!(plan_folds(&data, 5, 0.5, 3).unwrap(), plan);
        assert_eq!(plan_folds(&data, 1, 0.5, 3).unwrap().folds.len(), 1);
        assert!(plan_folds(&data, 5, 1.0, 3).is_err());
        assert!(plan_folds(&data, 5, 0.0, 3).is_err());
        assert!(plan_folds(&data, 0, 0.5, 3).is_err());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<u32> = (0..100).collect();
        seeded_shuffle(&mut v, 42);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
