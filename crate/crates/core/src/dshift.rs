//! Distribution-shift splits.
//!
//! Two mechanisms are supported: the permutation holdout for vectorized tasks
//! of complexity `m` (ordered window tuples withheld from training and used as
//! an adversarial test set), and the positional holdout for block-style
//! visual tasks (some digit classes never appear at some cells in training).

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::task::{label_of, window_slots, BlockPosition, TaskSpec, VALUE_SLOTS};
use crate::taskgen::{build_records, sample_example, Dataset, DatasetHeader, ShiftTag};

/// Largest `m` whose `(m+1)!` permutations are enumerated.
pub const MAX_PERM_COMPLEXITY: usize = 7;

/// All permutations of `(0, ..., m)` in lexicographic order.
pub fn perm_list(m: usize) -> Result<Vec<Vec<u8>>> {
    if m > MAX_PERM_COMPLEXITY {
        return Err(Error::BudgetExceeded(format!(
            "{}! permutations exceeds the m <= {MAX_PERM_COMPLEXITY} budget",
            m + 1
        )));
    }
    let mut current: Vec<u8> = (0..=m as u8).collect();
    let mut out = vec![current.clone()];
    while next_permutation(&mut current) {
        out.push(current.clone());
    }
    Ok(out)
}

fn next_permutation(xs: &mut [u8]) -> bool {
    let Some(i) = xs.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = xs.iter().rposition(|&x| x > xs[i]).expect("pivot has a successor");
    xs.swap(i, j);
    xs[i + 1..].reverse();
    true
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub m: usize,
    pub heldout: Vec<Vec<u8>>,
    pub tag: String,
}

impl HoldoutSpec {
    /// Validate a spec read from a manifest.
    pub fn validate(&self) -> Result<()> {
        let identity: Vec<u8> = (0..=self.m as u8).collect();
        if self.heldout.is_empty() || self.heldout.len() > factorial(self.m + 1) {
            return Err(Error::InvalidArgument(format!(
                "holdout size {} out of range",
                self.heldout.len()
            )));
        }
        if !self.heldout.contains(&identity) {
            return Err(Error::InvalidArgument("holdout lacks the identity tuple".into()));
        }
        for t in &self.heldout {
            let mut sorted = t.clone();
            sorted.sort_unstable();
            if sorted != identity {
                return Err(Error::InvalidArgument(format!(
                    "tuple {t:?} is not a permutation of 0..={}",
                    self.m
                )));
            }
        }
        Ok(())
    }

    pub fn identity(&self) -> Vec<u8> {
        (0..=self.m as u8).collect()
    }

    pub fn contains(&self, window: &[u8]) -> bool {
        self.heldout.iter().any(|t| t == window)
    }

    fn keys(&self) -> HashSet<u64> {
        self.heldout.iter().map(|t| tuple_key(t)).collect()
    }
}

fn tuple_key(t: &[u8]) -> u64 {
    t.iter().fold(0u64, |acc, &d| acc * 16 + d as u64)
}

/// `holdout-i`: the first `i` lexicographic permutations, identity first.
pub fn holdout_set(m: usize, i: usize) -> Result<HoldoutSpec> {
    let perms = perm_list(m)?;
    if i == 0 || i > perms.len() {
        return Err(Error::HoldoutOutOfRange { i, max: perms.len() });
    }
    Ok(HoldoutSpec {
        m,
        heldout: perms[..i].to_vec(),
        tag: format!("holdout-{i}"),
    })
}

fn check_match(spec: &TaskSpec, hs: &HoldoutSpec) -> Result<()> {
    if spec.complexity != hs.m {
        return Err(Error::SpecMismatch(format!(
            "task complexity {} vs holdout m {}",
            spec.complexity, hs.m
        )));
    }
    Ok(())
}

/// Probability that an iid window avoids the holdout set.
pub fn acceptance_probability(spec: &TaskSpec, hs: &HoldoutSpec) -> f64 {
    let outcomes = (spec.vocab as f64).powi(spec.window_len() as i32);
    let inside = hs.heldout.iter().filter(|t| t.iter().all(|&d| d < spec.vocab)).count() as f64;
    1.0 - inside / outcomes
}

/// Holdout training set: iid candidates whose pointed window tuple is not held
/// out. Rejection happens inside each example's own stream.
pub fn gen_train_holdout(spec: &TaskSpec, hs: &HoldoutSpec, n: usize, seed: u64, workers: usize) -> Result<Dataset> {
    spec.validate()?;
    check_match(spec, hs)?;
    let p = acceptance_probability(spec, hs);
    if p < 1e-6 {
        return Err(Error::InfeasibleHoldout(p));
    }
    let keys = hs.keys();
    let records = build_records(n, workers, |i| {
        let mut stream = RngStream::new(seed, i as u64);
        loop {
            let e = sample_example(&mut stream, spec)?;
            if !keys.contains(&tuple_key(&e.digits.window(spec.complexity)?)) {
                return Ok(e);
            }
        }
    })?;
    Ok(Dataset {
        header: DatasetHeader::new(*spec, seed, ShiftTag::HoldoutTrain),
        records,
    })
}

/// Adversarial test set: random pointer and background, with the pointed
/// window overwritten by `(0, 1, ..., m)` in slot order.
pub fn gen_adversarial_test(spec: &TaskSpec, n: usize, seed: u64, workers: usize) -> Result<Dataset> {
    spec.validate()?;
    if spec.window_len() > spec.vocab as usize {
        return Err(Error::InvalidArgument(format!(
            "identity tuple 0..={} does not fit vocabulary {}",
            spec.complexity, spec.vocab
        )));
    }
    let records = build_records(n, workers, |i| {
        let mut stream = RngStream::new(seed, i as u64);
        let mut e = sample_example(&mut stream, spec)?;
        let slots = window_slots(e.digits.pointer(), spec.complexity, VALUE_SLOTS)?;
        for (k, s) in slots.into_iter().enumerate() {
            e.digits.values_mut()[s] = k as u8;
        }
        e.label = label_of(&e.digits, spec)?;
        Ok(e)
    })?;
    Ok(Dataset {
        header: DatasetHeader::new(*spec, seed, ShiftTag::HoldoutAdversarialTest),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisjointReport {
    pub checked: usize,
    pub violations: Vec<usize>,
}

impl DisjointReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Indices of training examples whose pointed window is held out.
pub fn verify_disjoint(train: &Dataset, hs: &HoldoutSpec) -> Result<DisjointReport> {
    check_match(train.spec(), hs)?;
    let keys = hs.keys();
    let mut violations = Vec::new();
    for (i, e) in train.records.iter().enumerate() {
        if keys.contains(&tuple_key(&e.digits.window(hs.m)?)) {
            violations.push(i);
        }
    }
    Ok(DisjointReport {
        checked: train.len(),
        violations,
    })
}

/// Sidecar manifest describing a holdout experiment's files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutManifest {
    pub spec: TaskSpec,
    pub holdout: HoldoutSpec,
    pub seed: u64,
    pub train_file: String,
    pub train_count: usize,
    pub test_file: String,
    pub test_count: usize,
    pub generator: String,
}

/// Block-style positional holdout: digit classes excluded per value cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalHoldoutRule {
    pub excluded: BTreeMap<BlockPosition, Vec<u8>>,
}

impl Default for PositionalHoldoutRule {
    fn default() -> Self {
        let mut excluded = BTreeMap::new();
        excluded.insert(BlockPosition::UpperRight, vec![1, 2, 3]);
        excluded.insert(BlockPosition::LowerLeft, vec![4, 5, 6]);
        excluded.insert(BlockPosition::LowerRight, vec![0, 7, 8, 9]);
        Self { excluded }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPhase {
    Train,
    DshiftTest,
    HoldoutTest,
}

impl std::str::FromStr for SplitPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPhase::Train),
            "dshift-test" | "iid" => Ok(SplitPhase::DshiftTest),
            "holdout-test" => Ok(SplitPhase::HoldoutTest),
            _ => Err(Error::InvalidArgument(format!("unknown split phase `{s}`"))),
        }
    }
}

/// Allowed digit classes for each cell of a block-style example.
/// Index 0 is the pointer cell (top left); 1..=3 follow [`BlockPosition::cell`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub cells: Vec<Vec<u8>>,
}

impl SamplingPlan {
    pub fn iid(cells: usize) -> Self {
        Self {
            cells: vec![(0..10).collect(); cells],
        }
    }

    pub fn allowed(&self, pos: BlockPosition) -> &[u8] {
        &self.cells[pos.cell()]
    }
}

pub fn visual_split_plan(rule: &PositionalHoldoutRule, phase: SplitPhase) -> Result<SamplingPlan> {
    let all: Vec<u8> = (0..10).collect();
    let mut cells = vec![all.clone(); 4];
    for pos in BlockPosition::ALL {
        let excluded = rule.excluded.get(&pos).cloned().unwrap_or_default();
        if excluded.iter().any(|&d| d >= 10) {
            return Err(Error::InvalidArgument(format!(
                "excluded digits {excluded:?} out of range"
            )));
        }
        cells[pos.cell()] = match phase {
            SplitPhase::Train => all.iter().copied().filter(|d| !excluded.contains(d)).collect(),
            SplitPhase::DshiftTest => all.clone(),
            SplitPhase::HoldoutTest => {
                let mut e = excluded;
                e.sort_unstable();
                e.dedup();
                e
            }
        };
    }
    Ok(SamplingPlan { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Aggregation;
    use crate::taskgen::generate;

    #[test]
    fn perm_list_examples() {
        assert_eq!(perm_list(0).unwrap(), vec![vec![0]]);
        assert_eq!(perm_list(1).unwrap(), vec![vec![0, 1], vec![1, 0]]);
        let p2 = perm_list(2).unwrap();
        assert_eq!(p2.len(), 6);
        assert_eq!(p2[0], vec![0, 1, 2]);
        assert_eq!(p2[5], vec![2, 1, 0]);
        assert!(p2.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(perm_list(7).unwrap().len(), 40320);
        assert!(matches!(perm_list(8), Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn holdout_sets() {
        let h = holdout_set(1, 2).unwrap();
        assert_eq!(h.heldout, vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(h.tag, "holdout-2");
        assert_eq!(holdout_set(2, 1).unwrap().heldout, vec![vec![0, 1, 2]]);
        let all = holdout_set(2, 6).unwrap();
        assert_eq!(all.heldout, perm_list(2).unwrap());
        all.validate().unwrap();
        assert!(matches!(
            holdout_set(1, 7),
            Err(Error::HoldoutOutOfRange { i: 7, max: 2 })
        ));
        assert!(matches!(holdout_set(1, 0), Err(Error::HoldoutOutOfRange { .. })));
    }

    #[test]
    fn train_holdout_is_disjoint() {
        for (m, i) in [(1, 2), (2, 6), (2, 1), (0, 1)] {
            let spec = TaskSpec::new(m, Aggregation::ModSum).unwrap();
            let hs = holdout_set(m, i).unwrap();
            let ds = gen_train_holdout(&spec, &hs, 5_000, 21, 1).unwrap();
            assert_eq!(ds.len(), 5_000);
            assert_eq!(ds.header.shift, ShiftTag::HoldoutTrain);
            assert!(verify_disjoint(&ds, &hs).unwrap().is_clean());
            if m == 0 {
                assert!(ds.records.iter().all(|e| e.label != 0));
            }
        }
    }

    #[test]
    fn acceptance_rate_matches_binomial() {
        let spec = TaskSpec::new(2, Aggregation::ModSum).unwrap();
        let hs = holdout_set(2, 6).unwrap();
        let p = 1.0 - 6.0 / 1000.0;
        assert!((acceptance_probability(&spec, &hs) - p).abs() < 1e-12);
        let n = 100_000;
        let mut s = RngStream::new(77, 0);
        let accepted = (0..n)
            .filter(|_| {
                let e = sample_example(&mut s, &spec).unwrap();
                !hs.contains(&e.digits.window(2).unwrap())
            })
            .count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((accepted - n as f64 * p).abs() < 4.0 * sigma);
    }

    #[test]
    fn iid_violation_fraction() {
        let spec = TaskSpec::new(1, Aggregation::ModSum).unwrap();
        let hs = holdout_set(1, 2).unwrap();
        let n = 100_000;
        let ds = generate(&spec, n, 5).unwrap();
        let v = verify_disjoint(&ds, &hs).unwrap().violations.len() as f64;
        let p = 0.02;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((v - n as f64 * p).abs() < 4.0 * sigma, "{v}");
    }

    #[test]
    fn verify_disjoint_edge_cases() {
        let spec = TaskSpec::new(1, Aggregation::ModSum).unwrap();
        let empty = Dataset {
            header: DatasetHeader::new(spec, 0, ShiftTag::HoldoutTrain),
            records: vec![],
        };
        let hs = holdout_set(1, 2).unwrap();
        assert_eq!(verify_disjoint(&empty, &hs).unwrap().checked, 0);
        assert!(matches!(
            verify_disjoint(&empty, &holdout_set(2, 1).unwrap()),
            Err(Error::SpecMismatch(_))
        ));
    }

    #[test]
    fn adversarial_labels_constant() {
        for (m, label) in [(1usize, 1u8), (2, 3), (3, 6)] {
            let spec = TaskSpec::new(m, Aggregation::ModSum).unwrap();
            let ds = gen_adversarial_test(&spec, 2_000, 4, 1).unwrap();
            let identity: Vec<u8> = (0..=m as u8).collect();
            for e in &ds.records {
                assert_eq!(e.label, label);
                assert_eq!(e.digits.window(m).unwrap(), identity);
            }
        }
    }

    #[test]
    fn holdout_determinism_and_sharding() {
        let spec = TaskSpec::new(2, Aggregation::ModSum).unwrap();
        let hs = holdout_set(2, 3).unwrap();
        let a = gen_train_holdout(&spec, &hs, 1_000, 9, 1).unwrap();
        let b = gen_train_holdout(&spec, &hs, 1_000, 9, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn visual_plans() {
        let rule = PositionalHoldoutRule::default();
        let train = visual_split_plan(&rule, SplitPhase::Train).unwrap();
        assert_eq!(train.allowed(BlockPosition::UpperRight), &[0, 4, 5, 6, 7, 8, 9]);
        assert_eq!(train.cells[0], (0..10).collect::<Vec<u8>>());
        let holdout = visual_split_plan(&rule, SplitPhase::HoldoutTest).unwrap();
        assert_eq!(holdout.allowed(BlockPosition::LowerLeft), &[4, 5, 6]);
        assert_eq!(holdout.allowed(BlockPosition::LowerRight), &[0, 7, 8, 9]);
        let dshift = visual_split_plan(&rule, SplitPhase::DshiftTest).unwrap();
        assert!(dshift.cells.iter().all(|c| c == &(0..10).collect::<Vec<u8>>()));
    }
}
