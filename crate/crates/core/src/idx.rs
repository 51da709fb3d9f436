//! IDX tensor container (big-endian), as used by the MNIST distribution.
//!
//! Header: two zero bytes, a type byte (0x08 = unsigned byte), a rank byte,
//! then one big-endian `u32` per dimension.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UBYTE: u8 = 0x08;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }
}

pub fn encode(t: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.data.len());
    out.extend_from_slice(&t.magic().to_be_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

/// Parse an unsigned-byte IDX tensor whose magic must equal `expected_magic`.
pub fn decode(bytes: &[u8], expected_magic: u32) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            found: bytes.len() as u64,
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(Error::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header as u64,
            found: bytes.len() as u64,
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let body = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| Error::InvalidHeader(format!("dims {dims:?} overflow")))?;
    let expected = header as u64 + body;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::InvalidHeader(format!(
            "{} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read(path: impl AsRef<Path>, expected_magic: u32) -> Result<IdxTensor> {
    decode(&fs::read(path)?, expected_magic)
}

pub fn write(t: &IdxTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic() {
        let t = IdxTensor {
            dims: vec![2, 3],
            data: vec![1, 2, 3, 4, 5, 6],
        };
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], &[0, 0, 8, 2]);
        assert_eq!(decode(&bytes, 0x0802).unwrap(), t);
        assert!(matches!(decode(&bytes, LABELS_MAGIC), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1], 0x0802),
            Err(Error::Truncated { .. })
        ));
    }
}
