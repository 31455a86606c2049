//! IDX container format (big-endian, unsigned-byte payloads only).

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX data: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after IDX payload")]
    TrailingBytes(usize),
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
}

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn magic_for_rank(rank: usize) -> u32 {
    ((UBYTE as u32) << 8) | rank as u32
}

/// Decodes an IDX byte stream of the given rank (1 for labels, 3 for images).
pub fn decode(bytes: &[u8], rank: usize) -> std::result::Result<IdxArray, IdxError> {
    let header = 4 + 4 * rank;
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let expected = magic_for_rank(rank);
    if found != expected {
        return Err(IdxError::BadMagic { found, expected });
    }
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize).collect();
    let total = header + dims.iter().product::<usize>();
    match bytes.len() {
        n if n < total => Err(IdxError::Truncated { expected: total, actual: n }),
        n if n > total => Err(IdxError::TrailingBytes(n - total)),
        _ => Ok(IdxArray {
            dims,
            data: bytes[header..].to_vec(),
        }),
    }
}

pub fn encode(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&magic_for_rank(array.dims.len()).to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn read_file(path: &Path, rank: usize) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, rank).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, array: &IdxArray) -> Result<()> {
    std::fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IdxArray {
        IdxArray {
            dims: vec![2, 2, 3],
            data: (0..12).collect(),
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 2]);
        let back = decode(&bytes, 3).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn label_magic_is_2049() {
        assert_eq!(magic_for_rank(1), 2049);
        assert_eq!(magic_for_rank(3), 2051);
    }

    #[test]
    fn errors_are_distinct() {
        let bytes = encode(&sample());
        assert_eq!(
            decode(&bytes[..bytes.len() - 2], 3),
            Err(IdxError::Truncated {
                expected: bytes.len(),
                actual: bytes.len() - 2
            })
        );
        assert!(matches!(decode(&bytes, 1), Err(IdxError::BadMagic { found: 0x803, expected: 0x801 })));
        let mut long = bytes.clone();
        long.push(7);
        assert_eq!(decode(&long, 3), Err(IdxError::TrailingBytes(1)));
        assert!(matches!(decode(&bytes[..6], 3), Err(IdxError::Truncated { expected: 16, actual: 6 })));
    }
}
