//! Brute-force reference checks.
//!
//! Nothing here calls into the production labeling path in [`crate::task`];
//! the rule is re-derived with explicit loops so the two can be compared.

use serde::{Deserialize, Serialize};

use crate::dshift::HoldoutSpec;
use crate::error::{Error, Result};
use crate::task::{Aggregation, Sequence, TaskSpec};
use crate::taskgen::{Dataset, ShiftTag};

/// Largest enumeration domain `K^(m+2)` accepted by [`label_distribution`].
pub const ENUMERATION_BUDGET: u64 = 10_000_000;

fn gather_window(seq: &Sequence, m: usize) -> Vec<u8> {
    let digits = seq.digits();
    let slots = digits.len() - 1;
    let mut scratch = Vec::new();
    let mut slot = digits[0] as usize;
    let mut taken = 0;
    while taken <= m {
        scratch.push(digits[1 + slot]);
        slot += 1;
        if slot == slots {
            slot = 0;
        }
        taken += 1;
    }
    scratch
}

fn naive_aggregate(window: &[u8], kind: Aggregation, vocab: u8) -> u8 {
    match kind {
        Aggregation::ModSum => {
            let mut total = 0u64;
            for &v in window {
                total += v as u64;
            }
            (total % vocab as u64) as u8
        }
        Aggregation::Median => {
            let mut sorted = window.to_vec();
            // insertion sort
            for i in 1..sorted.len() {
                let mut j = i;
                while j > 0 && sorted[j - 1] > sorted[j] {
                    sorted.swap(j - 1, j);
                    j -= 1;
                }
            }
            sorted[(sorted.len() - 1) / 2]
        }
        Aggregation::MajVote => {
            let mut best_value = u8::MAX;
            let mut best_count = 0;
            for candidate in 0..vocab {
                let count = window.iter().filter(|&&v| v == candidate).count();
                if count > best_count {
                    best_count = count;
                    best_value = candidate;
                }
            }
            best_value
        }
        Aggregation::Min => {
            let mut lo = window[0];
            for &v in &window[1..] {
                if v < lo {
                    lo = v;
                }
            }
            lo
        }
        Aggregation::Max => {
            let mut hi = window[0];
            for &v in &window[1..] {
                if v > hi {
                    hi = v;
                }
            }
            hi
        }
    }
}

/// Label computed by an independent gather-then-aggregate path.
pub fn reference_label(seq: &Sequence, spec: &TaskSpec) -> Result<u8> {
    let slots = seq.digits().len() - 1;
    if spec.complexity >= slots {
        return Err(Error::InvalidComplexity {
            m: spec.complexity,
            slots,
        });
    }
    for &d in seq.digits() {
        if d >= spec.vocab {
            return Err(Error::InvalidDigit {
                value: d,
                vocab: spec.vocab,
            });
        }
    }
    if seq.digits()[0] as usize >= slots {
        return Err(Error::InvalidPointer {
            pointer: seq.digits()[0],
            slots,
        });
    }
    let window = gather_window(seq, spec.complexity);
    Ok(naive_aggregate(&window, spec.aggregation, spec.vocab))
}

/// Counts of each label over all pointers times all `K^(m+1)` window contents.
pub fn label_distribution(spec: &TaskSpec) -> Result<Vec<u64>> {
    let k = spec.vocab as u64;
    let window = spec.complexity + 1;
    let domain = (0..=window).try_fold(1u64, |acc, _| acc.checked_mul(k));
    match domain {
        Some(d) if d <= ENUMERATION_BUDGET => {}
        _ => {
            return Err(Error::BudgetExceeded(format!(
                "{}^{} configurations exceeds {ENUMERATION_BUDGET}",
                k,
                window + 1
            )))
        }
    }
    // every digit is a legal pointer while K <= 10
    let pointers = k;
    let mut counts = vec![0u64; spec.vocab as usize];
    let mut tuple = vec![0u8; window];
    loop {
        let label = naive_aggregate(&tuple, spec.aggregation, spec.vocab);
        counts[label as usize] += pointers;
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == window {
                return Ok(counts);
            }
            tuple[pos] += 1;
            if tuple[pos] < spec.vocab {
                break;
            }
            tuple[pos] = 0;
            pos += 1;
        }
    }
}

/// Exact label marginal when all `D`-bit digit groups are uniform and decoded
/// mod `K`, by enumerating every raw `D`-bit window.
pub fn decoded_label_marginal(spec: &TaskSpec) -> Result<Vec<f64>> {
    let mut bits = 0;
    while (1u32 << bits) < spec.vocab as u32 {
        bits += 1;
    }
    let raw = 1u64 << bits;
    let window = spec.complexity + 1;
    let domain = raw.checked_pow(window as u32).filter(|&d| d <= 1 << 24);
    let Some(domain) = domain else {
        return Err(Error::BudgetExceeded(format!("{raw}^{window} raw windows")));
    };
    // The window contents are independent of the pointer value, so the
    // pointer only permutes which slots are read.
    let mut counts = vec![0u64; spec.vocab as usize];
    let mut tuple = vec![0u8; window];
    for code in 0..domain {
        let mut c = code;
        for t in tuple.iter_mut() {
            *t = ((c % raw) % spec.vocab as u64) as u8;
            c /= raw;
        }
        counts[naive_aggregate(&tuple, spec.aggregation, spec.vocab) as usize] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / domain as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    pub mismatches: Vec<usize>,
    pub holdout_violations: Vec<usize>,
    pub label_histogram: Vec<u64>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.holdout_violations.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("audit report serializes")
    }
}

/// Relabel every record and, when a holdout is given, check windows: training
/// sets must avoid every held-out tuple and adversarial test sets must carry
/// exactly the identity tuple.
pub fn check_dataset(ds: &Dataset, hs: Option<&HoldoutSpec>) -> Result<AuditReport> {
    let spec = ds.spec();
    if let Some(hs) = hs {
        if hs.m != spec.complexity {
            return Err(Error::SpecMismatch(format!(
                "dataset m={} vs holdout m={}",
                spec.complexity, hs.m
            )));
        }
    }
    let identity: Vec<u8> = (0..=spec.complexity as u8).collect();
    let mut report = AuditReport {
        checked: 0,
        mismatches: Vec::new(),
        holdout_violations: Vec::new(),
        label_histogram: vec![0; spec.vocab as usize],
    };
    for (i, e) in ds.records.iter().enumerate() {
        let expected = reference_label(&e.digits, spec)?;
        if expected != e.label {
            report.mismatches.push(i);
        }
        match report.label_histogram.get_mut(e.label as usize) {
            Some(count) => *count += 1,
            None => {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: format!("label {} out of range", e.label),
                })
            }
        }
        if let Some(hs) = hs {
            let window = gather_window(&e.digits, spec.complexity);
            let violation = match ds.header.shift {
                ShiftTag::HoldoutAdversarialTest => window != identity,
                _ => hs.heldout.contains(&window),
            };
            if violation {
                report.holdout_violations.push(i);
            }
        }
        report.checked += 1;
    }
    Ok(report)
}
