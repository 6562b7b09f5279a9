//! Synthetic segmental translation task with known frame alignments.
//!
//! A clip is a run of segments. Every segment shows one lexicon symbol for a
//! few frames: each frame is the symbol's fixed embedding plus Gaussian noise.
//! The target emits one token per segment, optionally with adjacent pairs
//! swapped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thoughtroute_autodiff::Tensor;

use crate::batch::{ClipBatch, TokenBatch, EOS, FIRST_SYMBOL};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub lexicon_size: usize,
    pub d_x: usize,
    /// Inclusive frame-count range per segment.
    pub seg_len_range: (usize, usize),
    /// Inclusive segment-count range per clip.
    pub segs_per_clip_range: (usize, usize),
    pub noise_sigma: f64,
    pub reorder_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lexicon_size: 20,
            d_x: 32,
            seg_len_range: (4, 12),
            segs_per_clip_range: (3, 10),
            noise_sigma: 0.1,
            reorder_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.lexicon_size < 2 {
            return bad("lexicon_size must be >= 2");
        }
        if self.d_x == 0 {
            return bad("d_x must be >= 1");
        }
        let (a, b) = self.seg_len_range;
        if a == 0 || a > b {
            return bad("seg_len_range must be a nonempty range of positive lengths");
        }
        let (a, b) = self.segs_per_clip_range;
        if a == 0 || a > b {
            return bad("segs_per_clip_range must be a nonempty range of positive counts");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !(0.0..=0.5).contains(&self.reorder_prob) {
            return bad("reorder_prob must be in [0, 0.5]");
        }
        Ok(())
    }

    /// Vocabulary covering the specials and every symbol.
    pub fn vocab_size(&self) -> usize {
        self.lexicon_size + FIRST_SYMBOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[T_s, d_x]`; values are exactly representable as `f32`.
    pub features: Tensor,
    /// Target ids ending in EOS.
    pub tokens: Vec<usize>,
    /// Segment index of every frame.
    pub frame_to_segment: Vec<usize>,
    /// Symbol of every segment, in temporal order.
    pub segment_symbols: Vec<usize>,
}

impl SyntheticSample {
    pub fn len(&self) -> usize {
        self.frame_to_segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_to_segment.is_empty()
    }

    pub fn n_segments(&self) -> usize {
        self.segment_symbols.len()
    }
}

/// Sample generator holding the per-symbol embeddings drawn from `cfg.seed`.
pub struct Synthesizer {
    cfg: SynthConfig,
    table: Vec<f64>,
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let table = (0..cfg.lexicon_size * cfg.d_x)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { cfg, table })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn embedding(&self, symbol: usize) -> &[f64] {
        &self.table[symbol * self.cfg.d_x..(symbol + 1) * self.cfg.d_x]
    }

    /// Sample `index` of the stream keyed by `split_seed`.
    pub fn sample(&self, split_seed: u64, index: u64) -> SyntheticSample {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        rng.set_stream(index);
        let n_seg = rng.gen_range(cfg.segs_per_clip_range.0..=cfg.segs_per_clip_range.1);
        let mut symbols = Vec::with_capacity(n_seg);
        let mut lengths = Vec::with_capacity(n_seg);
        for j in 0..n_seg {
            let sym = match j {
                0 => rng.gen_range(0..cfg.lexicon_size),
                _ => {
                    let prev = symbols[j - 1];
                    let s = rng.gen_range(0..cfg.lexicon_size - 1);
                    if s >= prev {
                        s + 1
                    } else {
                        s
                    }
                }
            };
            symbols.push(sym);
            lengths.push(rng.gen_range(cfg.seg_len_range.0..=cfg.seg_len_range.1));
        }
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        let total: usize = lengths.iter().sum();
        let mut data = Vec::with_capacity(total * cfg.d_x);
        let mut frame_to_segment = Vec::with_capacity(total);
        for (j, (&sym, &len)) in symbols.iter().zip(&lengths).enumerate() {
            for _ in 0..len {
                for &v in self.embedding(sym) {
                    let x = if cfg.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
                    data.push(x as f32 as f64);
                }
                frame_to_segment.push(j);
            }
        }
        let mut tokens: Vec<usize> = symbols.iter().map(|s| s + FIRST_SYMBOL).collect();
        if cfg.reorder_prob > 0.0 {
            let mut i = 0;
            while i + 1 < tokens.len() {
                if rng.gen::<f64>() < cfg.reorder_prob {
                    tokens.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
        tokens.push(EOS);
        SyntheticSample {
            features: Tensor::new([total, cfg.d_x], data).expect("sizes agree"),
            tokens,
            frame_to_segment,
            segment_symbols: symbols,
        }
    }

    /// `count` samples of one split.
    pub fn dataset(&self, split_seed: u64, count: usize) -> Vec<SyntheticSample> {
        (0..count as u64).map(|i| self.sample(split_seed, i)).collect()
    }
}

/// Named dataset splits; each draws samples from `seed + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn seed(self, base: u64) -> u64 {
        base.wrapping_add(match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Right-pads features with zeros and targets with PAD, keeping order.
pub fn make_batch(samples: &[&SyntheticSample]) -> Result<(ClipBatch, TokenBatch)> {
    if samples.is_empty() {
        return Err(Error::input("cannot batch zero samples"));
    }
    let d_x = samples[0].features.shape()[1];
    let t = samples.iter().map(|s| s.len()).max().unwrap();
    let mut data = vec![0.0; samples.len() * t * d_x];
    for (b, s) in samples.iter().enumerate() {
        if s.features.shape()[1] != d_x {
            return Err(Error::input("samples disagree on feature width"));
        }
        data[b * t * d_x..b * t * d_x + s.features.numel()].copy_from_slice(s.features.data());
    }
    let clip = ClipBatch::new(
        Tensor::new([samples.len(), t, d_x], data)?,
        samples.iter().map(|s| s.len()).collect(),
    )?;
    let targets: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
    Ok((clip, TokenBatch::from_targets(&targets)?))
}
