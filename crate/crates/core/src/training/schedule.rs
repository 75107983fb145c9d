use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::seeded_shuffle;

/// Mix `parts` into `base` with splitmix64 finalisers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |h, &p| mix(h ^ mix(p)))
}

/// Gold batches then noisy batches per cycle. Serialised as `"g:n"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Interleave {
    pub gold: usize,
    pub noisy: usize,
}

impl Interleave {
    pub const GOLD_ONLY: Interleave = Interleave { gold: 1, noisy: 0 };

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.gold == 0 && self.noisy == 0 {
            return Err(TrainError::Config("interleave ratio 0:0 schedules nothing".into()));
        }
        Ok(())
    }

    pub fn cycle(&self) -> usize {
        self.gold + self.noisy
    }
}

impl Default for Interleave {
    fn default() -> Self {
        Interleave { gold: 1, noisy: 1 }
    }
}

impl fmt::Display for Interleave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.gold, self.noisy)
    }
}

impl From<Interleave> for String {
    fn from(ratio: Interleave) -> String {
        ratio.to_string()
    }
}

impl TryFrom<String> for Interleave {
    type Error = TrainError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for Interleave {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TrainError::Config(format!("interleave ratio `{s}` is not of the form g:n"));
        let (g, n) = s.split_once(':').ok_or_else(bad)?;
        let ratio = Interleave { gold: g.trim().parse().map_err(|_| bad())?, noisy: n.trim().parse().map_err(|_| bad())? };
        ratio.validate()?;
        Ok(ratio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Gold,
    Noisy,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Gold => "gold",
            Tag::Noisy => "noisy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchDescriptor {
    pub tag: Tag,
    /// Epoch of the tagged source this batch belongs to.
    pub epoch: u64,
    /// Positions into that source's example list.
    pub indices: Vec<usize>,
}

/// Epoch-wise reshuffled batches of one source.
#[derive(Clone, Debug)]
struct SourcePlan {
    len: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl SourcePlan {
    fn batches_per_epoch(&self) -> u64 {
        self.len.div_ceil(self.batch_size) as u64
    }

    fn batch(&mut self, k: u64) -> (u64, Vec<usize>) {
        let per_epoch = self.batches_per_epoch();
        let (epoch, within) = (k / per_epoch, (k % per_epoch) as usize);
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.len).collect();
            seeded_shuffle(&mut order, derive_seed(self.seed, &[epoch]));
            self.cached = Some((epoch, order));
        }
        let order = &self.cached.as_ref().expect("filled above").1;
        let start = within * self.batch_size;
        let end = (start + self.batch_size).min(self.len);
        (epoch, order[start..end].to_vec())
    }
}

/// Deterministic, infinite gold/noisy batch schedule. Batch `k` is a pure
/// function of `k`, so resuming only needs the step count.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    ratio: Interleave,
    gold: Option<SourcePlan>,
    noisy: Option<SourcePlan>,
}

impl BatchPlan {
    pub fn new(gold_len: usize, noisy_len: usize, batch_size: usize, ratio: Interleave, seed: u64) -> Result<Self, TrainError> {
        ratio.validate()?;
        if batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        let source = |len: usize, weight: usize, tag: Tag| -> Result<Option<SourcePlan>, TrainError> {
            if weight == 0 {
                return Ok(None);
            }
            if len == 0 {
                return Err(TrainError::Config(format!("ratio {ratio} needs {} examples but the set is empty", tag.as_str())));
            }
            Ok(Some(SourcePlan { len, batch_size, seed: derive_seed(seed, &[tag as u64 + 1]), cached: None }))
        };
        Ok(BatchPlan {
            ratio,
            gold: source(gold_len, ratio.gold, Tag::Gold)?,
            noisy: source(noisy_len, ratio.noisy, Tag::Noisy)?,
        })
    }

    pub fn ratio(&self) -> Interleave {
        self.ratio
    }

    /// Tag and per-source batch number of global step `step`.
    pub fn slot(&self, step: u64) -> (Tag, u64) {
        let (g, n) = (self.ratio.gold as u64, self.ratio.noisy as u64);
        let (cycle, r) = (step / (g + n), step % (g + n));
        if r < g {
            (Tag::Gold, cycle * g + r)
        } else {
            (Tag::Noisy, cycle * n + (r - g))
        }
    }

    pub fn batch(&mut self, step: u64) -> BatchDescriptor {
        let (tag, k) = self.slot(step);
        let plan = match tag {
            Tag::Gold => self.gold.as_mut(),
            Tag::Noisy => self.noisy.as_mut(),
        }
        .expect("slot only names sources with a positive ratio");
        let (epoch, indices) = plan.batch(k);
        BatchDescriptor { tag, epoch, indices }
    }

    /// Source whose passes define an epoch: gold, or noisy when the ratio
    /// schedules no gold.
    pub fn governing(&self) -> Tag {
        if self.ratio.gold > 0 {
            Tag::Gold
        } else {
            Tag::Noisy
        }
    }

    /// Number of steps that completes `epochs` passes over the governing
    /// source.
    pub fn steps_for_epochs(&self, epochs: u64) -> u64 {
        if epochs == 0 {
            return 0;
        }
        let (plan, weight, offset) = match self.governing() {
            Tag::Gold => (self.gold.as_ref(), self.ratio.gold as u64, 0),
            Tag::Noisy => (self.noisy.as_ref(), self.ratio.noisy as u64, self.ratio.gold as u64),
        };
        let per_epoch = plan.expect("governing source exists").batches_per_epoch();
        let last = epochs * per_epoch - 1;
        (last / weight) * self.ratio.cycle() as u64 + offset + last % weight + 1
    }

    /// Completed governing epochs after `steps` steps.
    pub fn epochs_completed(&self, steps: u64) -> u64 {
        let mut e = 0;
        while self.steps_for_epochs(e + 1) <= steps {
            e += 1;
        }
        e
    }
}
