//! `SGTD1` binary dataset container.
//!
//! Layout (all integers `u32` little-endian): the 5-byte magic `SGTD1`,
//! then version, sample count, `d_x` and lexicon size. Each sample stores
//! `T_s`, token count and segment count, followed by `T_s·d_x` `f32`
//! features (row-major), the tokens, the per-frame segment indices and the
//! segment symbols.

use std::fs;
use std::path::Path;

use thiserror::Error;
use thoughtroute_autodiff::Tensor;

use crate::synth::SyntheticSample;

pub const MAGIC: &[u8; 5] = b"SGTD1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not an SGTD1 file (bad magic)")]
    BadMagic,
    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// A decoded dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_x: usize,
    pub lexicon_size: usize,
    pub samples: Vec<SyntheticSample>,
}

fn put(out: &mut Vec<u8>, v: usize) -> Result<(), DatasetError> {
    let v = u32::try_from(v).map_err(|_| DatasetError::Malformed(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes samples; features are written as `f32`.
pub fn encode(d_x: usize, lexicon_size: usize, samples: &[SyntheticSample]) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION as usize, samples.len(), d_x, lexicon_size] {
        put(&mut out, v)?;
    }
    for s in samples {
        if s.features.rank() != 2 || s.features.shape()[1] != d_x || s.features.shape()[0] != s.len() {
            return Err(DatasetError::Malformed("feature shape disagrees with alignment".into()));
        }
        put(&mut out, s.len())?;
        put(&mut out, s.tokens.len())?;
        put(&mut out, s.n_segments())?;
        for &x in s.features.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for list in [&s.tokens, &s.frame_to_segment, &s.segment_symbols] {
            for &v in list.iter() {
                put(&mut out, v)?;
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DatasetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>, DatasetError> {
        (0..n).map(|_| self.u32()).collect()
    }
}

/// Parses an `SGTD1` byte buffer.
pub fn decode(buf: &[u8]) -> Result<Dataset, DatasetError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len()).map_err(|_| {
        if MAGIC.starts_with(buf) {
            DatasetError::Truncated {
                offset: 0,
                needed: MAGIC.len(),
            }
        } else {
            DatasetError::BadMagic
        }
    })?;
    if magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(DatasetError::Version(version));
    }
    let count = r.u32()?;
    let d_x = r.u32()?;
    let lexicon_size = r.u32()?;
    let mut samples = Vec::with_capacity(count.min(buf.len() / 12));
    for _ in 0..count {
        let t = r.u32()?;
        let n_tok = r.u32()?;
        let n_seg = r.u32()?;
        let bytes = r.take(t.checked_mul(d_x).and_then(|v| v.checked_mul(4)).ok_or_else(|| {
            DatasetError::Malformed("feature block too large".into())
        })?)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tokens = r.u32s(n_tok)?;
        let frame_to_segment = r.u32s(t)?;
        let segment_symbols = r.u32s(n_seg)?;
        if t == 0 || d_x == 0 {
            return Err(DatasetError::Malformed("empty clip".into()));
        }
        if frame_to_segment.iter().any(|&s| s >= n_seg) {
            return Err(DatasetError::Malformed("frame aligned to a missing segment".into()));
        }
        samples.push(SyntheticSample {
            features: Tensor::new([t, d_x], data).map_err(|e| DatasetError::Malformed(e.to_string()))?,
            tokens,
            frame_to_segment,
            segment_symbols,
        });
    }
    if r.pos != buf.len() {
        return Err(DatasetError::Malformed(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Dataset {
        d_x,
        lexicon_size,
        samples,
    })
}

pub fn write_dataset(path: &Path, d_x: usize, lexicon_size: usize, samples: &[SyntheticSample]) -> Result<(), DatasetError> {
    fs::write(path, encode(d_x, lexicon_size, samples)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    decode(&fs::read(path)?)
}
