//! The PVR labeling rule.
//!
//! A vectorized sequence holds one pointer digit followed by ten value slots.
//! The pointer selects a window of `m + 1` consecutive slots, starting at the
//! pointed slot and wrapping around modulo the slot count; the window values
//! are reduced to a single digit by an [`Aggregation`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of value slots following the pointer.
pub const VALUE_SLOTS: usize = 10;
/// Number of pointer digits at the head of a sequence.
pub const POINTER_COUNT: usize = 1;
/// Total digits per sequence.
pub const SEQ_LEN: usize = POINTER_COUNT + VALUE_SLOTS;
pub const DEFAULT_VOCAB: u8 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    ModSum = 0,
    Median = 1,
    MajVote = 2,
    Min = 3,
    Max = 4,
}

impl Aggregation {
    pub const ALL: [Aggregation; 5] = [
        Aggregation::ModSum,
        Aggregation::Median,
        Aggregation::MajVote,
        Aggregation::Min,
        Aggregation::Max,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(Error::UnsupportedAggregation(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::ModSum => "mod_sum",
            Aggregation::Median => "median",
            Aggregation::MajVote => "maj_vote",
            Aggregation::Min => "min",
            Aggregation::Max => "max",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mod_sum" | "modsum" => Ok(Aggregation::ModSum),
            "median" => Ok(Aggregation::Median),
            "maj_vote" | "majvote" | "mode" => Ok(Aggregation::MajVote),
            "min" => Ok(Aggregation::Min),
            "max" => Ok(Aggregation::Max),
            _ => Err(Error::UnknownAggregation(s.to_string())),
        }
    }
}

/// Task parameters that fully determine the labeling rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab: u8,
    pub complexity: usize,
    pub aggregation: Aggregation,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab: DEFAULT_VOCAB,
            complexity: 0,
            aggregation: Aggregation::ModSum,
        }
    }
}

impl TaskSpec {
    pub fn new(complexity: usize, aggregation: Aggregation) -> Result<Self> {
        Self::with_vocab(DEFAULT_VOCAB, complexity, aggregation)
    }

    pub fn with_vocab(vocab: u8, complexity: usize, aggregation: Aggregation) -> Result<Self> {
        let spec = Self {
            vocab,
            complexity,
            aggregation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=VALUE_SLOTS as u8).contains(&self.vocab) {
            return Err(Error::InvalidVocab(self.vocab as u32));
        }
        if self.complexity >= VALUE_SLOTS {
            return Err(Error::InvalidComplexity {
                m: self.complexity,
                slots: VALUE_SLOTS,
            });
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.complexity + 1
    }

    pub fn seq_len(&self) -> usize {
        SEQ_LEN
    }
}

/// One pointer digit followed by [`VALUE_SLOTS`] value digits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence(pub [u8; SEQ_LEN]);

impl Sequence {
    pub fn new(pointer: u8, values: [u8; VALUE_SLOTS]) -> Self {
        let mut digits = [0u8; SEQ_LEN];
        digits[0] = pointer;
        digits[1..].copy_from_slice(&values);
        Self(digits)
    }

    pub fn pointer(&self) -> u8 {
        self.0[0]
    }

    pub fn values(&self) -> &[u8] {
        &self.0[POINTER_COUNT..]
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.0[POINTER_COUNT..]
    }

    pub fn digits(&self) -> &[u8; SEQ_LEN] {
        &self.0
    }

    pub fn check(&self, vocab: u8) -> Result<()> {
        match self.0.iter().find(|&&d| d >= vocab) {
            Some(&value) => Err(Error::InvalidDigit { value, vocab }),
            None => Ok(()),
        }
    }

    /// Digits at the pointed window, in slot order.
    pub fn window(&self, m: usize) -> Result<Vec<u8>> {
        Ok(window_slots(self.pointer(), m, VALUE_SLOTS)?
            .into_iter()
            .map(|s| self.values()[s])
            .collect())
    }
}

/// Slot indices `[p, p+1, ..., p+m] mod slots`.
pub fn window_slots(pointer: u8, m: usize, slots: usize) -> Result<Vec<usize>> {
    if m >= slots {
        return Err(Error::InvalidComplexity { m, slots });
    }
    let p = pointer as usize;
    if p >= slots {
        return Err(Error::InvalidPointer { pointer, slots });
    }
    Ok((0..=m).map(|k| (p + k) % slots).collect())
}

/// Reduce window values to one digit.
///
/// Ties are resolved deterministically: median takes the lower median and
/// majority vote takes the smallest most-frequent value.
pub fn aggregate(values: &[u8], kind: Aggregation, vocab: u8) -> Result<u8> {
    if values.is_empty() {
        return Err(Error::InvalidWindow);
    }
    if let Some(&value) = values.iter().find(|&&v| v >= vocab) {
        return Err(Error::InvalidDigit { value, vocab });
    }
    Ok(aggregate_unchecked(values, kind, vocab))
}

fn aggregate_unchecked(values: &[u8], kind: Aggregation, vocab: u8) -> u8 {
    match kind {
        Aggregation::ModSum => (values.iter().map(|&v| v as u32).sum::<u32>() % vocab as u32) as u8,
        Aggregation::Min => *values.iter().min().expect("nonempty"),
        Aggregation::Max => *values.iter().max().expect("nonempty"),
        Aggregation::Median | Aggregation::MajVote => {
            let mut counts = [0u32; 256];
            for &v in values {
                counts[v as usize] += 1;
            }
            if kind == Aggregation::MajVote {
                let mut best = 0u8;
                for v in 1..vocab as usize {
                    if counts[v] > counts[best as usize] {
                        best = v as u8;
                    }
                }
                best
            } else {
                // counting-sort walk to the element at index (n - 1) / 2
                let target = (values.len() - 1) / 2;
                let mut seen = 0usize;
                for (v, &c) in counts.iter().enumerate() {
                    seen += c as usize;
                    if seen > target {
                        return v as u8;
                    }
                }
                unreachable!("target index lies within the window")
            }
        }
    }
}

/// Label of `seq` under `spec`.
pub fn label_of(seq: &Sequence, spec: &TaskSpec) -> Result<u8> {
    spec.validate()?;
    seq.check(spec.vocab)?;
    let m = spec.complexity;
    let p = seq.pointer() as usize;
    if p >= VALUE_SLOTS {
        return Err(Error::InvalidPointer {
            pointer: seq.pointer(),
            slots: VALUE_SLOTS,
        });
    }
    let mut window = [0u8; VALUE_SLOTS];
    for (k, w) in window.iter_mut().enumerate().take(m + 1) {
        *w = seq.values()[(p + k) % VALUE_SLOTS];
    }
    Ok(aggregate_unchecked(&window[..=m], spec.aggregation, spec.vocab))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPosition {
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl BlockPosition {
    pub const ALL: [BlockPosition; 3] = [
        BlockPosition::UpperRight,
        BlockPosition::LowerLeft,
        BlockPosition::LowerRight,
    ];

    /// Cell index in a 2x2 grid read row-major; cell 0 holds the pointer.
    pub fn cell(self) -> usize {
        match self {
            BlockPosition::UpperRight => 1,
            BlockPosition::LowerLeft => 2,
            BlockPosition::LowerRight => 3,
        }
    }
}

/// Block-style pointer rule: 0-3 upper right, 4-6 lower left, 7-9 lower right.
pub fn block_position_of(pointer: u8) -> Result<BlockPosition> {
    match pointer {
        0..=3 => Ok(BlockPosition::UpperRight),
        4..=6 => Ok(BlockPosition::LowerLeft),
        7..=9 => Ok(BlockPosition::LowerRight),
        _ => Err(Error::InvalidDigit {
            value: pointer,
            vocab: 10,
        }),
    }
}
