//! Padded model inputs.

use thoughtroute_autodiff::{Mask, Tensor};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// First id available to real symbols.
pub const FIRST_SYMBOL: usize = 4;

/// Frame features `[B, T_s, d_x]` with a trailing-padding validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    features: Tensor,
    mask: Tensor,
    lengths: Vec<usize>,
}

impl ClipBatch {
    /// Builds the mask from per-sample valid lengths.
    pub fn new(features: Tensor, lengths: Vec<usize>) -> Result<Self> {
        if features.rank() != 3 || features.shape()[0] != lengths.len() {
            return Err(Error::input(format!(
                "features {:?} do not match {} lengths",
                features.shape(),
                lengths.len()
            )));
        }
        let t = features.shape()[1];
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t) {
            return Err(Error::input(format!("valid length {bad} outside 1..={t}")));
        }
        let mask = Tensor::from_fn([lengths.len(), t], |i| {
            if i % t < lengths[i / t] {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            features,
            mask,
            lengths,
        })
    }

    /// Accepts an explicit `{0,1}` mask; it must be ones followed by zeros.
    pub fn from_mask(features: Tensor, mask: Tensor) -> Result<Self> {
        if mask.rank() != 2 || mask.shape() != &features.shape()[..2] {
            return Err(Error::input("mask shape must be [B, T_s]"));
        }
        let t = mask.shape()[1];
        let mut lengths = Vec::with_capacity(mask.shape()[0]);
        for b in 0..mask.shape()[0] {
            let row = mask.row(b);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::input("mask entries must be 0 or 1"));
            }
            let len = row.iter().take_while(|&&v| v == 1.0).count();
            if row[len..].iter().any(|&v| v != 0.0) {
                return Err(Error::input("mask must be a prefix of ones"));
            }
            lengths.push(len);
        }
        let _ = t;
        Self::new(features, lengths)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[2]
    }

    /// `[B, T_s, 1]` validity column for multiplying frame rows.
    pub fn valid_column(&self) -> Tensor {
        self.mask
            .clone()
            .reshape([self.batch_size(), self.max_len(), 1])
            .expect("mask reshape")
    }

    /// Key-padding mask `[B, 1, 1, T_s]` for attention over frames.
    pub fn key_mask(&self) -> Mask {
        Mask::from_validity([self.batch_size(), 1, 1, self.max_len()], self.mask.data())
            .expect("mask shape")
    }

    /// 1-based rank of each frame among valid frames (cumulative mask sum).
    pub fn frame_ranks(&self) -> Tensor {
        let t = self.max_len();
        let mut out = self.mask.clone();
        for row in out.data_mut().chunks_mut(t) {
            let mut run = 0.0;
            for v in row.iter_mut() {
                run += *v;
                *v = run;
            }
        }
        out
    }

    /// Sample `b` alone, trimmed to its valid length.
    pub fn sample(&self, b: usize) -> ClipBatch {
        let (t, dx) = (self.max_len(), self.feature_dim());
        let len = self.lengths[b];
        let start = b * t * dx;
        let data = self.features.data()[start..start + len * dx].to_vec();
        ClipBatch::new(Tensor::new([1, len, dx], data).expect("slice"), vec![len]).expect("valid")
    }
}

/// Teacher-forcing inputs and labels, both right-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    inputs: Vec<Vec<usize>>,
    labels: Vec<Vec<usize>>,
    lengths: Vec<usize>,
}

impl TokenBatch {
    /// From target sequences that end in [`EOS`]: inputs are BOS-shifted.
    pub fn from_targets(targets: &[Vec<usize>]) -> Result<Self> {
        let max = targets.iter().map(Vec::len).max().unwrap_or(0);
        if max == 0 {
            return Err(Error::input("empty target batch"));
        }
        let mut inputs = Vec::with_capacity(targets.len());
        let mut labels = Vec::with_capacity(targets.len());
        for t in targets {
            if t.last() != Some(&EOS) || t[..t.len() - 1].iter().any(|&v| v == PAD || v == BOS || v == EOS) {
                return Err(Error::input(format!("target {t:?} must be symbols followed by EOS")));
            }
            let mut inp = vec![BOS];
            inp.extend_from_slice(&t[..t.len() - 1]);
            inp.resize(max, PAD);
            let mut lab = t.clone();
            lab.resize(max, PAD);
            inputs.push(inp);
            labels.push(lab);
        }
        Ok(Self {
            inputs,
            labels,
            lengths: targets.iter().map(Vec::len).collect(),
        })
    }

    /// Raw decoder inputs (no labels), e.g. a decoding prefix.
    pub fn from_inputs(inputs: Vec<Vec<usize>>) -> Result<Self> {
        let max = inputs.iter().map(Vec::len).max().unwrap_or(0);
        if max == 0 || inputs.iter().any(|i| i.first() != Some(&BOS)) {
            return Err(Error::input("decoder inputs must start with BOS"));
        }
        let lengths = inputs.iter().map(Vec::len).collect();
        let inputs: Vec<Vec<usize>> = inputs
            .into_iter()
            .map(|mut v| {
                v.resize(max, PAD);
                v
            })
            .collect();
        Ok(Self {
            labels: vec![vec![PAD; max]; inputs.len()],
            inputs,
            lengths,
        })
    }

    pub fn inputs(&self) -> &[Vec<usize>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }

    pub fn max_len(&self) -> usize {
        self.inputs[0].len()
    }

    /// `[B, T_t]` with 1 at non-PAD label positions.
    pub fn pad_mask(&self) -> Tensor {
        let t = self.max_len();
        Tensor::from_fn([self.batch_size(), t], |i| (i % t < self.lengths[i / t]) as u8 as f64)
    }

    /// Number of non-PAD label positions.
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn sample(&self, b: usize) -> TokenBatch {
        let n = self.lengths[b];
        TokenBatch {
            inputs: vec![self.inputs[b][..n].to_vec()],
            labels: vec![self.labels[b][..n].to_vec()],
            lengths: vec![n],
        }
    }
}
