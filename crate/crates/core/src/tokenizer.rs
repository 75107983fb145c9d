//! Byte-level byte-pair encoding shared by intents and snippets.
//!
//! Ids 0..=2 are PAD, EOS and UNK; ids 3..=258 are the 256 raw bytes; every
//! learned merge that creates a new byte string appends one id after that.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
const BYTE_OFFSET: u32 = 3;
/// Three specials plus the 256 byte symbols.
pub const BASE_VOCAB_SIZE: usize = 259;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {0} is below the byte-level base of {BASE_VOCAB_SIZE}")]
    VocabTooSmall(usize),
    #[error("token id {id} at position {position} is outside the vocabulary (size {size})")]
    IdOutOfRange { id: u32, position: usize, size: usize },
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("invalid vocabulary file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Encoded ids plus the length before truncation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub original_length: usize,
}

impl TokenSequence {
    pub fn truncated(&self) -> bool {
        self.original_length > self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<Vec<u8>>,
    /// (left, right, result) in learned order.
    merges: Vec<(u32, u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    vocab_size: usize,
    specials: BTreeMap<String, u32>,
    pieces: Vec<String>,
    merges: Vec<[u32; 2]>,
}

/// GPT-2 style printable rendering of bytes, so vocabulary files stay diffable.
fn byte_to_char(b: u8) -> char {
    let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    if printable {
        return char::from(b);
    }
    let shifted = (0..=b).filter(|&x| !((b'!'..=b'~').contains(&x) || (0xA1..=0xAC).contains(&x) || (0xAE..=0xFF).contains(&x))).count();
    char::from_u32(255 + shifted as u32).expect("shifted code point is valid")
}

fn render(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| byte_to_char(b)).collect()
}

impl Vocabulary {
    /// Only specials and the byte alphabet.
    pub fn byte_level() -> Self {
        let mut pieces = vec![b"<pad>".to_vec(), b"</s>".to_vec(), b"<unk>".to_vec()];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        Vocabulary { pieces, merges: Vec::new(), ranks: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn merges(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.merges.iter().map(|&(l, r, _)| (self.pieces[l as usize].as_slice(), self.pieces[r as usize].as_slice()))
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.pieces[left as usize].clone();
        bytes.extend_from_slice(&self.pieces[right as usize]);
        // a byte string reachable through two different splits keeps one id
        let result = match self.pieces.iter().skip(BASE_VOCAB_SIZE).position(|p| *p == bytes) {
            Some(i) => (i + BASE_VOCAB_SIZE) as u32,
            None => {
                self.pieces.push(bytes);
                (self.pieces.len() - 1) as u32
            }
        };
        self.ranks.insert((left, right), (self.merges.len(), result));
        self.merges.push((left, right, result));
        result
    }

    /// Learn merges over `corpus` until `vocab_size` pieces exist or no
    /// adjacent pair occurs at least twice. Ties on frequency go to the
    /// lexicographically smallest (left, right) byte-string pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        if vocab_size < BASE_VOCAB_SIZE {
            return Err(TokenizerError::VocabTooSmall(vocab_size));
        }
        let mut vocab = Self::byte_level();

        let mut unique: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            *unique.entry(text.as_ref()).or_default() += 1;
        }
        let mut words: Vec<(Vec<u32>, usize)> = unique
            .into_iter()
            .map(|(t, c)| (t.bytes().map(|b| b as u32 + BYTE_OFFSET).collect(), c))
            .collect();

        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, (ids, c)) in words.iter().enumerate() {
            for p in ids.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += c;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }

        while vocab.len() < vocab_size {
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (&vocab.pieces[pa.0 as usize], &vocab.pieces[pa.1 as usize]);
                        let kb = (&vocab.pieces[pb.0 as usize], &vocab.pieces[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(&p, _)| p);
            let Some((left, right)) = best else { break };
            let result = vocab.push_merge(left, right);

            let affected: Vec<usize> = where_.remove(&(left, right)).into_iter().flatten().collect();
            for wi in affected {
                let (ids, c) = &mut words[wi];
                for p in ids.windows(2) {
                    if let Some(n) = counts.get_mut(&(p[0], p[1])) {
                        *n -= *c;
                    }
                }
                *ids = apply_merge(ids, left, right, result);
                for p in ids.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += *c;
                    where_.entry((p[0], p[1])).or_default().insert(wi);
                }
            }
            counts.retain(|_, n| *n > 0);
        }
        Ok(vocab)
    }

    /// Byte-level segmentation followed by learned merges in rank order.
    pub fn encode(&self, text: &str, max_len: usize, append_eos: bool) -> Result<TokenSequence, TokenizerError> {
        if max_len == 0 {
            return Err(TokenizerError::ZeroMaxLen);
        }
        let mut ids = self.segment(text);
        if append_eos {
            ids.push(EOS);
        }
        let original_length = ids.len();
        ids.truncate(max_len);
        Ok(TokenSequence { ids, original_length })
    }

    /// Subword ids of `text` without EOS or truncation.
    pub fn segment(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&(rank, result)| (rank, p[0], p[1], result)))
                .min();
            let Some((_, left, right, result)) = best else { break };
            ids = apply_merge(&ids, left, right, result);
        }
        ids
    }

    /// Concatenate pieces, dropping PAD and EOS. Invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            match id {
                PAD | EOS => {}
                UNK => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
                _ => bytes.extend_from_slice(self.piece(id).ok_or(TokenizerError::IdOutOfRange {
                    id,
                    position,
                    size: self.len(),
                })?),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn to_file(&self) -> VocabularyFile {
        let specials = [("eos", EOS), ("pad", PAD), ("unk", UNK)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let pieces = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| if i < BYTE_OFFSET as usize { String::from_utf8_lossy(p).into_owned() } else { render(p) })
            .collect();
        VocabularyFile {
            vocab_size: self.len(),
            specials,
            pieces,
            merges: self.merges.iter().map(|&(l, r, _)| [l, r]).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("vocabulary serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabularyFile = serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        for (name, id) in [("pad", PAD), ("eos", EOS), ("unk", UNK)] {
            if file.specials.get(name) != Some(&id) {
                return Err(TokenizerError::Format(format!("special `{name}` must have id {id}")));
            }
        }
        let mut vocab = Self::byte_level();
        for (i, &[l, r]) in file.merges.iter().enumerate() {
            if l as usize >= vocab.len() || r as usize >= vocab.len() {
                return Err(TokenizerError::Format(format!("merge {i} references an unknown piece")));
            }
            vocab.push_merge(l, r);
        }
        if vocab.len() != file.vocab_size || vocab.to_file().pieces != file.pieces {
            return Err(TokenizerError::Format("pieces do not match the merge list".into()));
        }
        Ok(vocab)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())
            .map_err(|source| TokenizerError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TokenizerError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}

fn apply_merge(ids: &[u32], left: u32, right: u32, result: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}
