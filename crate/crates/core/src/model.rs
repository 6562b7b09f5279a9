//! End-to-end forward pass and parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thoughtroute_autodiff::{Graph, ParameterStore, Var};

use crate::batch::{ClipBatch, TokenBatch};
use crate::config::ModelConfig;
use crate::decoder::{self, DecoderPrior};
use crate::encoder::{self, Frames};
use crate::error::Result;
use crate::nn::Init;
use crate::segmentation::{self, Segmentation};
use crate::thinking::{self, Thoughts};

/// Everything computed from the clip alone.
pub struct Encoded {
    pub frames: Frames,
    /// `[B, T_s, d]` evidence.
    pub e: Var,
    pub seg: Segmentation,
    pub thoughts: Thoughts,
}

/// Graph nodes of a teacher-forced forward pass.
pub struct Forward {
    pub encoded: Encoded,
    /// `[B, T_t, |V|]`.
    pub logits: Var,
    /// One prior per decoder layer.
    pub priors: Vec<DecoderPrior>,
}

/// Fresh parameters for `cfg`, Xavier-initialized from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let d = cfg.d_model();
    encoder::init(&mut init, &cfg.encoder)?;
    segmentation::init(&mut init, &cfg.segmentation, d, cfg.seg_hidden())?;
    thinking::init(&mut init, &cfg.think, d)?;
    decoder::init(&mut init, &cfg.decoder, d)?;
    Ok(store)
}

/// Encoder, segmentation and thinking.
pub fn encode(g: &mut Graph, cfg: &ModelConfig, clip: &ClipBatch) -> Result<Encoded> {
    let frames = Frames::new(g, clip)?;
    let e = encoder::encode(g, &cfg.encoder, clip, &frames)?;
    let seg = segmentation::segment(g, &cfg.segmentation, clip, &frames, e)?;
    let thoughts = thinking::think(g, cfg, e, &frames, &seg)?;
    Ok(Encoded {
        frames,
        e,
        seg,
        thoughts,
    })
}

/// Decoder logits on top of an existing encoding.
pub fn decode(g: &mut Graph, cfg: &ModelConfig, enc: &Encoded, tokens: &TokenBatch) -> Result<(Var, Vec<DecoderPrior>)> {
    decoder::decode_logits(
        g,
        cfg,
        tokens,
        enc.thoughts.c,
        enc.e,
        &enc.frames,
        enc.thoughts.prior_routing().a,
        enc.seg.w_seg,
    )
}

/// Teacher-forced pass over a clip batch and BOS-shifted targets.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, clip: &ClipBatch, tokens: &TokenBatch) -> Result<Forward> {
    if clip.batch_size() != tokens.batch_size() {
        return Err(crate::error::Error::input(format!(
            "clip batch of {} but token batch of {}",
            clip.batch_size(),
            tokens.batch_size()
        )));
    }
    let encoded = encode(g, cfg, clip)?;
    let (logits, priors) = decode(g, cfg, &encoded, tokens)?;
    Ok(Forward {
        encoded,
        logits,
        priors,
    })
}
