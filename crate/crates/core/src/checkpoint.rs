//! Binary checkpoint format.
//!
//! ```text
//! "XFERCKPT" | u32 version | u32 count
//! count × ( u16 name_len | name | u8 rank | rank × u32 dim | f32 values )
//! u32 text_len | text
//! ```
//!
//! Integers and floats are little-endian. The trailing text is the config
//! snapshot; its first line is `step=N`.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Element;

pub const MAGIC: &[u8; 8] = b"XFERCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {at}: needed {needed} more")]
    Truncated { at: usize, needed: usize },
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error("checkpoint text is not valid UTF-8")]
    Utf8,
    #[error("checkpoint text lacks a `step=` line")]
    MissingStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: String,
    pub step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                at: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> std::result::Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }
}

impl Checkpoint {
    /// Snapshot of every tensor of `net`, including batchnorm statistics.
    pub fn from_network<T: Element>(net: &Network<T>, config: &str, step: u64) -> Self {
        Checkpoint {
            tensors: net
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
                })
                .collect(),
            config: config.to_string(),
            step,
        }
    }

    /// Copies the stored values into `net`, which must have the same tensors.
    pub fn apply_to<T: Element>(&self, net: &Network<T>) -> Result<()> {
        let values: Vec<(String, Vec<usize>, Vec<T>)> =
            self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone(), t.data.iter().map(|&v| T::c(v as f64)).collect())).collect();
        net.load_values(&values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let text = format!("step={}\n{}", self.step, self.config);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let found = r.u32()?;
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.text(len)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let len = r.u32()? as usize;
        let text = r.text(len)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
        let step = first.strip_prefix("step=").and_then(|s| s.parse().ok()).ok_or(CheckpointError::MissingStep)?;
        Ok(Checkpoint {
            tensors,
            config: rest.to_string(),
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                NamedTensor {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25],
                },
                NamedTensor {
                    name: "b".into(),
                    shape: vec![],
                    data: vec![42.0],
                },
            ],
            config: "alpha=0.1\nbeta=0.1\n".into(),
            step: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 17);
        assert_eq!(back.config, sample().config);
        assert_eq!(back.tensors[0].data[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = sample().to_bytes();
        let text_len = "step=17\n".len() + sample().config.len();
        assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err(), CheckpointError::Truncated { at: bytes.len() - text_len, needed: 3 });
        bytes[8] = 2;
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err(), CheckpointError::Version { found: 2 });
        bytes[0] = b'Y';
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err(), CheckpointError::BadMagic);
        assert_eq!(Checkpoint::from_bytes(b"XF").unwrap_err(), CheckpointError::BadMagic);
    }

    #[test]
    fn network_round_trip() {
        let spec = NetworkSpec::compact(8, 4, 6, 3);
        let a = Network::<f32>::build(&spec, 1).unwrap();
        let b = Network::<f32>::build(&spec, 2).unwrap();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_network(&a, "", 0).to_bytes()).unwrap();
        ck.apply_to(&b).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(*na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let other = Network::<f32>::build(&NetworkSpec::compact(8, 4, 6, 4), 2).unwrap();
        assert!(ck.apply_to(&other).is_err());
    }
}
