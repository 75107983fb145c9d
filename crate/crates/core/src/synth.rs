//! Seeded generators for stand-in datasets: curated intent/snippet pairs, a
//! larger mined set with confidence scores and corruptions, and labeling
//! functions paired with several descriptions each.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Example, Source};

/// Size of the labeling-function fixture.
pub const NL2LF_SIZE: usize = 193;

const LISTS: &[&str] = &["lst", "items", "values", "nums", "names", "words", "data", "scores", "rows", "keys"];
const STRINGS: &[&str] = &["s", "text", "line", "name", "word", "title", "msg", "path"];
const DICTS: &[&str] = &["d", "mydict", "counts", "config", "mapping", "table"];
const FRAMES: &[&str] = &["df", "data", "frame", "sales", "users"];
const FILES: &[&str] = &["data.csv", "input.txt", "log.txt", "config.json", "out.csv", "notes.md"];
const SEPS: &[&str] = &[",", " ", ";", "-", ":", "|"];
const COLUMNS: &[&str] = &["age", "price", "name", "date", "score", "city"];

struct Slots<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Slots<'_> {
    fn pick(&mut self, pool: &[&'static str]) -> &'static str {
        pool.choose(self.rng).expect("non-empty pool")
    }

    fn num(&mut self) -> u32 {
        self.rng.random_range(1..20)
    }
}

/// (intent phrasings, snippet) for one template instance.
fn template(id: usize, s: &mut Slots<'_>) -> (Vec<String>, String) {
    match id {
        0 => {
            let v = s.pick(LISTS);
            (vec![format!("sort list {v} in descending order"), format!("sort {v} from largest to smallest")], format!("sorted({v}, reverse=True)"))
        }
        1 => {
            let v = s.pick(STRINGS);
            (vec![format!("convert string {v} to an integer"), format!("parse {v} as int")], format!("int({v})"))
        }
        2 => {
            let v = s.pick(LISTS);
            (vec![format!("get the length of {v}"), format!("count the number of elements in {v}")], format!("len({v})"))
        }
        3 => {
            let (d, k) = (s.pick(DICTS), s.pick(COLUMNS));
            (vec![format!("remove key '{k}' from dictionary {d}"), format!("delete entry '{k}' of {d}")], format!("{d}.pop('{k}')"))
        }
        4 => {
            let f = s.pick(FILES);
            (vec![format!("open file '{f}' for reading"), format!("open '{f}' in read mode")], format!("open('{f}', 'r')"))
        }
        5 => {
            let (v, c) = (s.pick(STRINGS), s.pick(SEPS));
            (vec![format!("split string {v} on '{c}'"), format!("split {v} by the delimiter '{c}'")], format!("{v}.split('{c}')"))
        }
        6 => {
            let (v, c) = (s.pick(LISTS), s.pick(SEPS));
            (vec![format!("join the elements of {v} with '{c}'"), format!("concatenate strings in {v} separated by '{c}'")], format!("'{c}'.join({v})"))
        }
        7 => {
            let f = s.pick(FILES);
            (vec![format!("read csv file '{f}' into a dataframe"), format!("load '{f}' with pandas")], format!("pd.read_csv('{f}')"))
        }
        8 => {
            let (df, n) = (s.pick(FRAMES), s.num());
            (vec![format!("print the first {n} rows of dataframe {df}"), format!("show top {n} rows of {df}")], format!("print({df}.head({n}))"))
        }
        9 => {
            let (v, x) = (s.pick(LISTS), s.num());
            (vec![format!("append {x} to list {v}"), format!("add {x} at the end of {v}")], format!("{v}.append({x})"))
        }
        10 => {
            let v = s.pick(STRINGS);
            (vec![format!("convert {v} to lowercase"), format!("make string {v} lower case")], format!("{v}.lower()"))
        }
        11 => {
            let v = s.pick(LISTS);
            (vec![format!("sum the elements of {v}"), format!("compute the total of list {v}")], format!("sum({v})"))
        }
        12 => {
            let v = s.pick(LISTS);
            (vec![format!("find the maximum value in {v}"), format!("get the largest element of {v}")], format!("max({v})"))
        }
        13 => {
            let (v, a, b) = (s.pick(STRINGS), s.pick(SEPS), s.pick(SEPS));
            (vec![format!("replace '{a}' with '{b}' in string {v}"), format!("substitute every '{a}' in {v} by '{b}'")], format!("{v}.replace('{a}', '{b}')"))
        }
        14 => {
            let (k, v) = (s.pick(LISTS), s.pick(LISTS));
            (vec![format!("create a dictionary from lists {k} and {v}"), format!("zip {k} and {v} into a dict")], format!("dict(zip({k}, {v}))"))
        }
        15 => {
            let v = s.pick(LISTS);
            (vec![format!("reverse list {v}"), format!("get {v} in reverse order")], format!("{v}[::-1]"))
        }
        16 => {
            let v = s.pick(LISTS);
            (vec![format!("get unique elements of {v}"), format!("remove duplicates from {v}")], format!("list(set({v}))"))
        }
        17 => {
            let (v, x) = (s.pick(LISTS), s.num());
            (vec![format!("count occurrences of {x} in {v}"), format!("how many times does {x} appear in {v}")], format!("{v}.count({x})"))
        }
        18 => {
            let n = s.num() % 6 + 1;
            let x = s.pick(&["x", "y", "val", "total", "mean"]);
            (vec![format!("round {x} to {n} decimal places"), format!("round the number {x} to {n} digits")], format!("round({x}, {n})"))
        }
        19 => {
            let (df, c) = (s.pick(FRAMES), s.pick(COLUMNS));
            (vec![format!("sort dataframe {df} by column '{c}'"), format!("order rows of {df} by '{c}'")], format!("{df}.sort_values('{c}')"))
        }
        20 => {
            let (df, c) = (s.pick(FRAMES), s.pick(COLUMNS));
            (vec![format!("drop column '{c}' from dataframe {df}"), format!("remove the '{c}' column of {df}")], format!("{df}.drop('{c}', axis=1)"))
        }
        21 => {
            let (d, k) = (s.pick(DICTS), s.pick(COLUMNS));
            (vec![format!("check if key '{k}' exists in {d}"), format!("test whether {d} has key '{k}'")], format!("'{k}' in {d}"))
        }
        22 => {
            let v = s.pick(STRINGS);
            (vec![format!("strip whitespace from {v}"), format!("remove leading and trailing spaces of {v}")], format!("{v}.strip()"))
        }
        _ => {
            let (v, n) = (s.pick(LISTS), s.num());
            (vec![format!("get the first {n} items of {v}"), format!("slice the first {n} elements from {v}")], format!("{v}[:{n}]"))
        }
    }
}

const TEMPLATES: usize = 24;

/// Curated-style pairs.
pub fn conala_gold(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = rng.random_range(0..TEMPLATES);
            let (intents, snippet) = template(t, &mut Slots { rng: &mut rng });
            let intent = intents.choose(&mut rng).expect("phrasings").clone();
            Example::new(i as u64, intent, snippet, Source::Gold, 1.0).expect("generated pair is valid")
        })
        .collect()
}

/// Mined-style pairs: question phrasings, and a share of corrupted snippets
/// whose confidence is lowered accordingly.
pub fn conala_noisy(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006E_6F69_7379);
    let prefixes = ["how to ", "python: ", "how do i ", "", "best way to "];
    (0..n)
        .map(|i| {
            let t = rng.random_range(0..TEMPLATES);
            let (intents, mut snippet) = template(t, &mut Slots { rng: &mut rng });
            let intent = format!("{}{}", prefixes.choose(&mut rng).expect("prefixes"), intents.choose(&mut rng).expect("phrasings"));
            let roll: f64 = rng.random();
            let prob: f64 = if roll < 0.7 {
                rng.random_range(0.6..1.0)
            } else if roll < 0.85 {
                // mismatched snippet from another template
                let other = (t + rng.random_range(1..TEMPLATES)) % TEMPLATES;
                snippet = template(other, &mut Slots { rng: &mut rng }).1;
                rng.random_range(0.0..0.4)
            } else if roll < 0.95 {
                let keep = (snippet.len() / 2).max(1);
                snippet = snippet.chars().take(keep).collect();
                rng.random_range(0.1..0.5)
            } else {
                snippet = format!("x = {snippet}");
                rng.random_range(0.3..0.7)
            };
            let prob = (prob * 1e4).round() / 1e4;
            Example::new(i as u64, intent, snippet, Source::Noisy, prob).expect("generated pair is valid")
        })
        .collect()
}

const LABELS: &[(&str, &str)] = &[("SPAM", "spam"), ("HAM", "ham"), ("POS", "positive"), ("NEG", "negative")];
const KEYWORDS: &[&str] = &["free", "win", "click", "offer", "love", "great", "bad", "refund", "http", "check"];

/// One labeling function and its descriptions.
fn labeling_function(rng: &mut ChaCha8Rng) -> (Vec<String>, String) {
    let (label, word) = *LABELS.choose(rng).expect("labels");
    let kw = *KEYWORDS.choose(rng).expect("keywords");
    let n = rng.random_range(2..9);
    match rng.random_range(0..6) {
        0 => (
            vec![
                format!("label {word} if the text contains '{kw}'"),
                format!("mark as {word} when '{kw}' appears"),
                format!("{word} if '{kw}' is in the text, otherwise abstain"),
            ],
            format!("def lf(x):\n    return {label} if '{kw}' in x.text.lower() else ABSTAIN"),
        ),
        1 => (
            vec![
                format!("label {word} if the text has more than {n} words"),
                format!("texts longer than {n} words are {word}"),
            ],
            format!("def lf(x):\n    return {label} if len(x.text.split()) > {n} else ABSTAIN"),
        ),
        2 => (
            vec![
                format!("{word} if '{kw}' occurs at least {n} times"),
                format!("label {word} when the text repeats '{kw}' {n} or more times"),
            ],
            format!("def lf(x):\n    return {label} if x.text.count('{kw}') >= {n} else ABSTAIN"),
        ),
        3 => (
            vec![
                format!("label {word} if the text is all upper case"),
                format!("shouting messages are {word}"),
            ],
            format!("def lf(x):\n    return {label} if x.text.isupper() else ABSTAIN"),
        ),
        4 => (
            vec![
                format!("{word} if the text matches the regex '{kw}'"),
                format!("use a regular expression for '{kw}' to label {word}"),
            ],
            format!("def lf(x):\n    return {label} if re.search(r'{kw}', x.text) else ABSTAIN"),
        ),
        _ => (
            vec![
                format!("label {word} if the text starts with '{kw}'"),
                format!("{word} when the message begins with '{kw}'"),
            ],
            format!("def lf(x):\n    return {label} if x.text.startswith('{kw}') else ABSTAIN"),
        ),
    }
}

/// Labeling-function pairs; each function contributes one to three
/// descriptions as separate examples.
pub fn nl2lf(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C66);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (descriptions, snippet) = labeling_function(&mut rng);
        let take = rng.random_range(1..=descriptions.len());
        for d in descriptions.into_iter().take(take) {
            if out.len() == n {
                break;
            }
            out.push(Example::new(out.len() as u64, d, snippet.clone(), Source::Nl2lf, 1.0).expect("generated pair is valid"));
        }
    }
    out
}
