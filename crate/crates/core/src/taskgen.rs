//! Deterministic generation and serialization of vectorized PVR datasets.
//!
//! Example `i` of a dataset is drawn from stream `i` of the dataset seed, so
//! the bytes of a dataset depend only on `(spec, n, seed)` and never on how
//! the work is sharded.
//!
//! The `PVR1` container is little-endian:
//!
//! ```text
//! "PVR1" | u32 version | u32 K | u32 seq_len | u32 pointer_count | u32 m
//!        | u32 aggregation | u32 shift | u64 count | u64 seed
//!        | count x (seq_len digit bytes, 1 label byte)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::rng::RngStream;
use crate::task::{label_of, Aggregation, Sequence, TaskSpec, POINTER_COUNT, SEQ_LEN};

pub const MAGIC: &[u8; 4] = b"PVR1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 7 * 4 + 2 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftTag {
    Iid = 0,
    HoldoutTrain = 1,
    HoldoutAdversarialTest = 2,
    DshiftTest = 3,
}

impl ShiftTag {
    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(ShiftTag::Iid),
            1 => Ok(ShiftTag::HoldoutTrain),
            2 => Ok(ShiftTag::HoldoutAdversarialTest),
            3 => Ok(ShiftTag::DshiftTest),
            _ => Err(Error::InvalidHeader(format!("unknown shift tag {id}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub digits: Sequence,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: TaskSpec,
    pub seed: u64,
    pub shift: ShiftTag,
    pub format_version: u32,
}

impl DatasetHeader {
    pub fn new(spec: TaskSpec, seed: u64, shift: ShiftTag) -> Self {
        Self {
            spec,
            seed,
            shift,
            format_version: FORMAT_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.header.spec
    }
}

/// Draw one iid example.
pub fn sample_example(stream: &mut RngStream, spec: &TaskSpec) -> Result<Example> {
    let mut digits = [0u8; SEQ_LEN];
    for d in digits.iter_mut() {
        *d = stream.next_digit(spec.vocab as u32)?;
    }
    let digits = Sequence(digits);
    let label = label_of(&digits, spec)?;
    Ok(Example { digits, label })
}

/// Generate `n` iid examples, example `i` from stream `i` of `seed`.
pub fn generate(spec: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    generate_with(spec, n, seed, ShiftTag::Iid, 1)
}

pub fn generate_with(spec: &TaskSpec, n: usize, seed: u64, shift: ShiftTag, workers: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("example count must be at least 1".into()));
    }
    let records = build_records(n, workers, |i| {
        let mut stream = RngStream::new(seed, i as u64);
        sample_example(&mut stream, spec)
    })?;
    Ok(Dataset {
        header: DatasetHeader::new(*spec, seed, shift),
        records,
    })
}

/// Runs a per-index example builder, surfacing allocation failure as
/// [`Error::OutOfCapacity`].
pub(crate) fn build_records<F>(n: usize, workers: usize, f: F) -> Result<Vec<Example>>
where
    F: Fn(usize) -> Result<Example> + Sync + Send,
{
    let mut probe: Vec<Example> = Vec::new();
    probe.try_reserve_exact(n).map_err(|_| Error::OutOfCapacity(n))?;
    drop(probe);
    map_indexed(n, workers, f).into_iter().collect()
}

pub fn encode_pvr(ds: &Dataset) -> Vec<u8> {
    let h = &ds.header;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (SEQ_LEN + 1));
    out.extend_from_slice(MAGIC);
    for v in [
        h.format_version,
        h.spec.vocab as u32,
        SEQ_LEN as u32,
        POINTER_COUNT as u32,
        h.spec.complexity as u32,
        h.spec.aggregation.id(),
        h.shift as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    for r in &ds.records {
        out.extend_from_slice(r.digits.digits());
        out.push(r.label);
    }
    out
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
}

fn decode_header(bytes: &[u8]) -> Result<(DatasetHeader, u64)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let vocab = u32_at(bytes, 8);
    let seq_len = u32_at(bytes, 12);
    let pointer_count = u32_at(bytes, 16);
    let m = u32_at(bytes, 20);
    let aggregation = Aggregation::from_id(u32_at(bytes, 24))?;
    let shift = ShiftTag::from_id(u32_at(bytes, 28))?;
    let count = u64_at(bytes, 32);
    let seed = u64_at(bytes, 40);
    if seq_len as usize != SEQ_LEN || pointer_count as usize != POINTER_COUNT {
        return Err(Error::InvalidHeader(format!(
            "unsupported layout seq_len={seq_len} pointer_count={pointer_count}"
        )));
    }
    if vocab > u8::MAX as u32 {
        return Err(Error::InvalidVocab(vocab));
    }
    let spec = TaskSpec::with_vocab(vocab as u8, m as usize, aggregation)?;
    Ok((
        DatasetHeader {
            spec,
            seed,
            shift,
            format_version: version,
        },
        count,
    ))
}

/// Parse a `PVR1` image. The header is validated before any record is
/// touched; records must hold in-range digits and labels. Label correctness
/// is left to [`crate::oracle::check_dataset`].
pub fn decode_pvr(bytes: &[u8]) -> Result<Dataset> {
    let (header, count) = decode_header(bytes)?;
    let record_len = (SEQ_LEN + 1) as u64;
    let expected = count
        .checked_mul(record_len)
        .and_then(|b| b.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::InvalidHeader(format!("record count {count} overflows")))?;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::InvalidHeader(format!(
            "{} trailing bytes after {count} records",
            bytes.len() as u64 - expected
        )));
    }
    let vocab = header.spec.vocab;
    let records = bytes[HEADER_LEN..]
        .chunks_exact(SEQ_LEN + 1)
        .enumerate()
        .map(|(index, chunk)| {
            let digits = Sequence(chunk[..SEQ_LEN].try_into().expect("seq_len bytes"));
            let label = chunk[SEQ_LEN];
            if let Err(e) = digits.check(vocab) {
                return Err(Error::InvalidRecord {
                    index,
                    reason: e.to_string(),
                });
            }
            if digits.pointer() as usize >= crate::task::VALUE_SLOTS || label >= vocab {
                return Err(Error::InvalidRecord {
                    index,
                    reason: format!("label {label} out of range"),
                });
            }
            Ok(Example { digits, label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header, records })
}

pub fn write_pvr(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_pvr(ds))?;
    w.flush()?;
    Ok(())
}

pub fn read_pvr(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_pvr(&bytes)
}

pub fn csv_header() -> Vec<String> {
    (0..SEQ_LEN)
        .map(|i| format!("x{i}"))
        .chain(std::iter::once("y".to_string()))
        .collect()
}

pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header())?;
    for r in &ds.records {
        w.write_record(
            r.digits
                .digits()
                .iter()
                .chain(std::iter::once(&r.label))
                .map(|d| d.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, BufWriter::new(File::create(path)?))
}

/// Parse rows written by [`export_csv`] back into examples.
pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<Example>> {
    let mut r = csv::Reader::from_reader(reader);
    let expected = csv_header();
    let headers = r.headers()?;
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::InvalidHeader(format!("unexpected CSV header {headers:?}")));
    }
    r.records()
        .enumerate()
        .map(|(index, row)| {
            let row = row?;
            let parsed: Vec<u8> = row
                .iter()
                .map(|f| f.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidRecord {
                    index,
                    reason: e.to_string(),
                })?;
            if parsed.len() != SEQ_LEN + 1 {
                return Err(Error::InvalidRecord {
                    index,
                    reason: format!("{} fields", parsed.len()),
                });
            }
            Ok(Example {
                digits: Sequence(parsed[..SEQ_LEN].try_into().expect("seq_len")),
                label: parsed[SEQ_LEN],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Aggregation::*;

    #[test]
    fn sample_respects_rule() {
        let m0 = TaskSpec::new(0, ModSum).unwrap();
        let m9 = TaskSpec::new(9, ModSum).unwrap();
        for i in 0..200 {
            let mut s = RngStream::new(3, i);
            let e = sample_example(&mut s, &m0).unwrap();
            assert_eq!(e.label, e.digits.values()[e.digits.pointer() as usize]);
            let e = sample_example(&mut s, &m9).unwrap();
            let sum: u32 = e.digits.values().iter().map(|&v| v as u32).sum();
            assert_eq!(e.label as u32, sum % 10);
        }
    }

    #[test]
    fn label_histogram_uniform_for_mod_sum() {
        let spec = TaskSpec::new(1, ModSum).unwrap();
        let ds = generate(&spec, 100_000, 11).unwrap();
        let mut counts = [0f64; 10];
        for r in &ds.records {
            counts[r.label as usize] += 1.0;
        }
        let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c - 10_000.0).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn zero_examples_rejected() {
        let spec = TaskSpec::default();
        assert!(matches!(generate(&spec, 0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset {
            header: DatasetHeader::new(TaskSpec::new(2, Median).unwrap(), 5, ShiftTag::DshiftTest),
            records: vec![],
        };
        let bytes = encode_pvr(&ds);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_pvr(&bytes).unwrap(), ds);
    }

    #[test]
    fn header_errors_are_distinct() {
        let ds = generate(&TaskSpec::default(), 3, 1).unwrap();
        let good = encode_pvr(&ds);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_pvr(&bad), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_pvr(&bad), Err(Error::UnsupportedVersion(2))));

        let mut bad = good.clone();
        bad[24] = 9;
        assert!(matches!(decode_pvr(&bad), Err(Error::UnsupportedAggregation(9))));

        let mut bad = good.clone();
        bad[20] = 10;
        assert!(matches!(decode_pvr(&bad), Err(Error::InvalidComplexity { .. })));

        assert!(matches!(
            decode_pvr(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode_pvr(&good[..20]), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[HEADER_LEN + 3] = 12;
        assert!(matches!(decode_pvr(&bad), Err(Error::InvalidRecord { index: 0, .. })));
    }

    #[test]
    fn csv_row_format() {
        let digits = Sequence::new(7, [0, 1, 2, 3, 4, 5, 6, 9, 8, 2]);
        let ds = Dataset {
            header: DatasetHeader::new(TaskSpec::default(), 0, ShiftTag::Iid),
            records: vec![Example { digits, label: 9 }],
        };
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x0,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,y\n7,0,1,2,3,4,5,6,9,8,2,9\n");

        let empty = Dataset { records: vec![], ..ds };
        let mut buf = Vec::new();
        write_csv(&empty, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x0,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,y\n");
    }

    #[test]
    fn csv_round_trip_relabels() {
        let spec = TaskSpec::new(3, MajVote).unwrap();
        let ds = generate(&spec, 500, 8).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let parsed = parse_csv(buf.as_slice()).unwrap();
        assert_eq!(parsed, ds.records);
        for e in parsed {
            assert_eq!(label_of(&e.digits, &spec).unwrap(), e.label);
        }
    }
}
