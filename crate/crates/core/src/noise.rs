//! Monte-Carlo noise sensitivity of PVR target functions.
//!
//! Inputs are encoded as bit vectors: each of the 11 digits takes `D` bits
//! (`D = 4` for `K = 10`), most significant bit first, and any bit pattern is
//! mapped back to a digit by reducing modulo `K`. `NS_delta[f]` is the
//! probability that `f(x) != f(y)` for uniform `x` and `y` obtained from `x`
//! by flipping each bit independently with probability `delta`.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::rng::{derive_seed, RngStream};
use crate::task::{label_of, Sequence, TaskSpec, SEQ_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitCodec {
    pub vocab: u8,
    pub bits_per_digit: usize,
}

impl BitCodec {
    pub fn new(vocab: u8) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidVocab(vocab as u32));
        }
        let mut bits = 0;
        while (1usize << bits) < vocab as usize {
            bits += 1;
        }
        Ok(Self {
            vocab,
            bits_per_digit: bits,
        })
    }

    pub fn bits_per_sequence(&self) -> usize {
        SEQ_LEN * self.bits_per_digit
    }

    pub fn encode(&self, seq: &Sequence) -> BitVector {
        let d = self.bits_per_digit;
        let mut bv = BitVector::zeros(self.bits_per_sequence());
        for (g, &digit) in seq.digits().iter().enumerate() {
            for b in 0..d {
                bv.set(g * d + b, (digit >> (d - 1 - b)) & 1 == 1);
            }
        }
        bv
    }

    /// Read each `D`-bit group as an unsigned integer and reduce mod `K`.
    pub fn decode(&self, bits: &BitVector) -> Result<Sequence> {
        let expected = self.bits_per_sequence();
        if bits.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: bits.len(),
            });
        }
        let d = self.bits_per_digit;
        let mut digits = [0u8; SEQ_LEN];
        for (g, digit) in digits.iter_mut().enumerate() {
            let raw = (0..d).fold(0u32, |acc, b| (acc << 1) | bits.get(g * d + b) as u32);
            *digit = (raw % self.vocab as u32) as u8;
        }
        Ok(Sequence(digits))
    }
}

/// Up to 64 bits; bit `i` is stored at word position `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitVector {
    word: u64,
    len: usize,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        assert!(len <= 64, "bit vectors hold at most 64 bits");
        Self { word: 0, len }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let mut bv = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            bv.set(i, b != 0);
        }
        bv
    }

    pub fn random(len: usize, stream: &mut RngStream) -> Self {
        let mut bv = Self::zeros(len);
        bv.word = stream.next_u64() & bv.mask();
        bv
    }

    fn mask(&self) -> u64 {
        if self.len == 64 {
            u64::MAX
        } else {
            (1u64 << self.len) - 1
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.word >> i) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        if v {
            self.word |= 1 << i;
        } else {
            self.word &= !(1 << i);
        }
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i) as u8).collect()
    }

    pub fn count_ones(&self) -> u32 {
        self.word.count_ones()
    }

    pub fn xor(&self, other: &BitVector) -> BitVector {
        BitVector {
            word: self.word ^ other.word,
            len: self.len,
        }
    }
}

/// Flip every bit independently with probability `delta`.
pub fn flip(bits: &BitVector, delta: f64, stream: &mut RngStream) -> BitVector {
    let mut mask = 0u64;
    for i in 0..bits.len {
        if stream.next_f64() < delta {
            mask |= 1 << i;
        }
    }
    BitVector {
        word: bits.word ^ mask,
        len: bits.len,
    }
}

/// `count` log-uniform points on `[e^lo, e^hi]`.
pub fn log_uniform_grid(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo.exp()],
        _ => (0..count)
            .map(|i| (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp())
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsConfig {
    pub samples: usize,
    pub runs: usize,
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            runs: 10,
            grid: log_uniform_grid(50, -7.0, -1.0),
            seed: 0,
        }
    }
}

impl NsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.runs == 0 {
            return Err(Error::InvalidArgument("samples and runs must be positive".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("empty delta grid".into()));
        }
        if let Some(d) = self.grid.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(Error::InvalidArgument(format!("grid point {d} outside (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsEstimate {
    pub mean: f64,
    /// Standard error of the mean across runs.
    pub stderr: f64,
    pub runs: Vec<f64>,
}

impl NsEstimate {
    pub fn interval(&self, sigmas: f64) -> (f64, f64) {
        (self.mean - sigmas * self.stderr, self.mean + sigmas * self.stderr)
    }
}

/// Noise sensitivity of an arbitrary digit-sequence function. Run `r` draws
/// from stream `r` of `stream_seed`.
pub fn ns_estimate_with<F>(
    f: F,
    codec: &BitCodec,
    delta: f64,
    samples: usize,
    runs: usize,
    stream_seed: u64,
) -> Result<NsEstimate>
where
    F: Fn(&Sequence) -> u8,
{
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta {delta} outside [0, 1]")));
    }
    if samples == 0 || runs == 0 {
        return Err(Error::InvalidArgument("samples and runs must be positive".into()));
    }
    let len = codec.bits_per_sequence();
    let mut fractions = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut stream = RngStream::new(stream_seed, r as u64);
        let mut changed = 0usize;
        for _ in 0..samples {
            let x = BitVector::random(len, &mut stream);
            let y = flip(&x, delta, &mut stream);
            if f(&codec.decode(&x)?) != f(&codec.decode(&y)?) {
                changed += 1;
            }
        }
        fractions.push(changed as f64 / samples as f64);
    }
    let mean = fractions.iter().sum::<f64>() / runs as f64;
    let stderr = if runs > 1 {
        let var = fractions.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        (var / runs as f64).sqrt()
    } else {
        (mean * (1.0 - mean) / samples as f64).sqrt()
    };
    Ok(NsEstimate {
        mean,
        stderr,
        runs: fractions,
    })
}

fn stream_seed_for(spec: &TaskSpec, delta: f64, seed: u64) -> u64 {
    derive_seed(
        seed,
        &[
            spec.aggregation.id() as u64,
            spec.complexity as u64,
            spec.vocab as u64,
            delta.to_bits(),
        ],
    )
}

/// `NS_delta` of the PVR target `label_of . decode`.
pub fn ns_estimate(spec: &TaskSpec, delta: f64, cfg: &NsConfig) -> Result<NsEstimate> {
    spec.validate()?;
    let codec = BitCodec::new(spec.vocab)?;
    ns_estimate_with(
        |s| label_of(s, spec).expect("decoded digits are valid"),
        &codec,
        delta,
        cfg.samples,
        cfg.runs,
        stream_seed_for(spec, delta, cfg.seed),
    )
}

/// Estimates over the whole grid, in grid order.
pub fn ns_curve(spec: &TaskSpec, cfg: &NsConfig, workers: usize) -> Result<Vec<NsEstimate>> {
    cfg.validate()?;
    map_indexed(cfg.grid.len(), workers, |i| ns_estimate(spec, cfg.grid[i], cfg))
        .into_iter()
        .collect()
}

/// Mean of the per-delta estimates over the grid.
pub fn avg_ns(spec: &TaskSpec, cfg: &NsConfig, workers: usize) -> Result<f64> {
    let curve = ns_curve(spec, cfg, workers)?;
    Ok(curve.iter().map(|e| e.mean).sum::<f64>() / curve.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsRow {
    pub spec: TaskSpec,
    pub delta: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Every `(spec, delta)` pair, sorted by aggregation id, `m`, then delta.
pub fn ns_sweep(specs: &[TaskSpec], cfg: &NsConfig, workers: usize) -> Result<Vec<NsRow>> {
    cfg.validate()?;
    let mut specs = specs.to_vec();
    specs.sort_by_key(|s| (s.aggregation.id(), s.complexity, s.vocab));
    specs.dedup();
    let mut deltas = cfg.grid.clone();
    deltas.sort_by(f64::total_cmp);
    let pairs: Vec<(TaskSpec, f64)> = specs
        .iter()
        .flat_map(|s| deltas.iter().map(move |&d| (*s, d)))
        .collect();
    map_indexed(pairs.len(), workers, |i| {
        let (spec, delta) = pairs[i];
        ns_estimate(&spec, delta, cfg).map(|e| NsRow {
            spec,
            delta,
            mean: e.mean,
            stderr: e.stderr,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[NsRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["aggregation", "m", "delta", "ns_mean", "ns_stderr"])?;
    for r in rows {
        w.write_record([
            r.spec.aggregation.name().to_string(),
            r.spec.complexity.to_string(),
            r.delta.to_string(),
            r.mean.to_string(),
            r.stderr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line per spec: aggregation, m and average NS over the sweep's deltas.
pub fn sweep_summary(rows: &[NsRow]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < rows.len() {
        let spec = rows[i].spec;
        let group: Vec<&NsRow> = rows[i..].iter().take_while(|r| r.spec == spec).collect();
        let avg = group.iter().map(|r| r.mean).sum::<f64>() / group.len() as f64;
        let _ = writeln!(
            out,
            "{:<9} m={} avg_ns={:.6}",
            spec.aggregation.name(),
            spec.complexity,
            avg
        );
        i += group.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Aggregation;

    fn codec() -> BitCodec {
        BitCodec::new(10).unwrap()
    }

    fn group(bits: &[u8]) -> BitVector {
        let mut all = bits.to_vec();
        all.resize(44, 0);
        BitVector::from_bits(&all)
    }

    #[test]
    fn codec_width() {
        assert_eq!(codec().bits_per_digit, 4);
        assert_eq!(codec().bits_per_sequence(), 44);
        assert_eq!(BitCodec::new(2).unwrap().bits_per_digit, 1);
        assert_eq!(BitCodec::new(16).unwrap().bits_per_digit, 4);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(codec().decode(&group(&[0, 1, 1, 1])).unwrap().pointer(), 7);
        assert_eq!(codec().decode(&group(&[1, 1, 0, 1])).unwrap().pointer(), 3);
        assert_eq!(codec().decode(&group(&[1, 1, 1, 1])).unwrap().pointer(), 5);
        let short = BitVector::from_bits(&[0; 40]);
        assert!(matches!(
            codec().decode(&short),
            Err(Error::LengthMismatch {
                expected: 44,
                found: 40
            })
        ));
    }

    #[test]
    fn encode_decode_identity() {
        let s = Sequence::new(7, [0, 1, 2, 3, 4, 5, 6, 9, 8, 2]);
        assert_eq!(codec().decode(&codec().encode(&s)).unwrap(), s);
    }

    #[test]
    fn flip_extremes() {
        let mut s = RngStream::new(1, 0);
        let x = BitVector::random(44, &mut s);
        assert_eq!(flip(&x, 0.0, &mut s), x);
        let c = flip(&x, 1.0, &mut s);
        assert_eq!(x.xor(&c).count_ones(), 44);
    }

    #[test]
    fn flip_half_rate() {
        let mut s = RngStream::new(2, 0);
        let trials = 100_000usize;
        let x = BitVector::zeros(44);
        let mut per_bit = [0u64; 44];
        for _ in 0..trials {
            let y = flip(&x, 0.5, &mut s);
            for (i, c) in per_bit.iter_mut().enumerate() {
                *c += y.get(i) as u64;
            }
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        for c in per_bit {
            assert!((c as f64 - trials as f64 / 2.0).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn ns_zero_at_zero_delta() {
        let spec = TaskSpec::new(3, Aggregation::ModSum).unwrap();
        let cfg = NsConfig {
            samples: 2_000,
            runs: 3,
            ..NsConfig::default()
        };
        let e = ns_estimate(&spec, 0.0, &cfg).unwrap();
        assert_eq!(e.mean, 0.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn constant_function_has_zero_sensitivity() {
        for delta in [0.01, 0.3, 1.0] {
            let e = ns_estimate_with(|_| 4, &codec(), delta, 1_000, 2, 5).unwrap();
            assert_eq!(e.mean, 0.0);
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = log_uniform_grid(50, -7.0, -1.0);
        assert_eq!(g.len(), 50);
        assert!((g[0] - (-7f64).exp()).abs() < 1e-15);
        assert!((g[49] - (-1f64).exp()).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        NsConfig::default().validate().unwrap();
    }

    #[test]
    fn sweep_rows_sorted_and_deterministic() {
        let specs: Vec<TaskSpec> = [Aggregation::Max, Aggregation::ModSum]
            .into_iter()
            .flat_map(|a| (0..2).map(move |m| TaskSpec::new(m, a).unwrap()))
            .rev()
            .collect();
        let cfg = NsConfig {
            samples: 200,
            runs: 2,
            grid: log_uniform_grid(3, -7.0, -1.0),
            seed: 3,
        };
        let rows = ns_sweep(&specs, &cfg, 1).unwrap();
        assert_eq!(rows.len(), 12);
        let keys: Vec<_> = rows
            .iter()
            .map(|r| (r.spec.aggregation.id(), r.spec.complexity, r.delta.to_bits()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(rows, ns_sweep(&specs, &cfg, 4).unwrap());
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("aggregation,m,delta,ns_mean,ns_stderr\nmod_sum,0,"));
        assert_eq!(sweep_summary(&rows).lines().count(), 4);
    }
}
