//! Plan-then-ground decoder: attend to thoughts, then to frames under a
//! token-to-frame prior derived from the routing.

use thoughtroute_autodiff::{Graph, Mask, Tensor, Var};

use crate::batch::TokenBatch;
use crate::config::{DecoderConfig, ModelConfig};
use crate::encoder::Frames;
use crate::error::{Error, Result};
use crate::nn::{self, Init};

/// Per-layer thought attention and the frame prior it induces.
#[derive(Clone, Copy, Debug)]
pub struct DecoderPrior {
    /// `[B, T_t, K]` head-averaged thought attention.
    pub alpha: Var,
    /// `[B, T_t, M]`, `α·A`.
    pub beta: Var,
    /// `[B, T_t, T_s]`, `β·W_seg`.
    pub w: Var,
}

pub fn init(init: &mut Init, cfg: &DecoderConfig, d: usize) -> Result<()> {
    init.xavier("dec.embed".into(), cfg.vocab_size, d)?;
    for l in 0..cfg.layers {
        let p = format!("dec.{l}");
        init.attention(&format!("{p}.self"), d)?;
        init.attention(&format!("{p}.think"), d)?;
        init.attention(&format!("{p}.ground"), d)?;
        init.ffn(&format!("{p}.ffn"), d)?;
    }
    init.layer_norm("dec.out.ln", d)?;
    init.linear("dec.out", d, cfg.vocab_size, true)
}

/// Word embedding plus sinusoidal position; PAD rows are zero.
pub fn embed_tokens(g: &mut Graph, tokens: &TokenBatch, dropout: f64) -> Result<Var> {
    let (b, t) = (tokens.batch_size(), tokens.max_len());
    let ids: Vec<usize> = tokens.inputs().iter().flatten().copied().collect();
    let table = g.param("dec.embed")?;
    let d = g.shape(table)[1];
    let x = g.embedding(table, &ids)?;
    let x = g.reshape(x, &[b, t, d])?;
    let pe = g.constant(nn::sinusoidal(t, d))?;
    let x = g.add(x, pe)?;
    let x = if tokens.lengths().iter().any(|&l| l < t) {
        let keep = g.constant(tokens.pad_mask().reshape([b, t, 1])?)?;
        g.mul(x, keep)?
    } else {
        x
    };
    Ok(g.dropout(x, dropout)?)
}

/// `H + Dropout(XAttn(LN(H), C))` over all thoughts; also returns `α`.
pub fn think_xattn(g: &mut Graph, prefix: &str, h: Var, c: Var, heads: usize, dropout: f64) -> Result<(Var, Var)> {
    let q = nn::layer_norm(g, &format!("{prefix}.ln"), h)?;
    let att = nn::attention(g, prefix, q, c, heads, None, None, dropout)?;
    let a = g.dropout(att.out, dropout)?;
    let out = g.add(h, a)?;
    let alpha = nn::mean_heads(g, att.weights)?;
    let s = g.shape(alpha).to_vec();
    let alpha = g.reshape(alpha, &[s[0], s[2], s[3]])?;
    Ok((out, alpha))
}

/// `β = α·A`, `w = β·W_seg`.
pub fn token_frame_prior(g: &mut Graph, alpha: Var, a: Var, w_seg: Var) -> Result<DecoderPrior> {
    let beta = g.matmul(alpha, a)?;
    let w = g.matmul(beta, w_seg)?;
    Ok(DecoderPrior { alpha, beta, w })
}

/// Frame cross-attention with `λ_w log(w + ε)` added to the logits when the
/// prior is enabled.
#[allow(clippy::too_many_arguments)]
pub fn grounded_xattn(
    g: &mut Graph,
    prefix: &str,
    cfg: &DecoderConfig,
    h: Var,
    e: Var,
    frames: &Frames,
    w: Var,
    eps: f64,
    dropout: f64,
) -> Result<Var> {
    let bias = if cfg.use_prior && cfg.lambda_w != 0.0 {
        let s = g.shape(w).to_vec();
        let lw = g.add_scalar(w, eps)?;
        let lw = g.log(lw)?;
        let lw = if cfg.lambda_w == 1.0 {
            lw
        } else {
            g.mul_scalar(lw, cfg.lambda_w)?
        };
        Some(g.reshape(lw, &[s[0], 1, s[1], s[2]])?)
    } else {
        None
    };
    let q = nn::layer_norm(g, &format!("{prefix}.ln"), h)?;
    let att = nn::attention(g, prefix, q, e, cfg.heads, frames.key_mask.as_ref(), bias, dropout)?;
    let a = g.dropout(att.out, dropout)?;
    Ok(g.add(h, a)?)
}

/// Self-attention, thought attention, grounded attention, FFN.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    c: Var,
    e: Var,
    frames: &Frames,
    a: Var,
    w_seg: Var,
) -> Result<(Var, DecoderPrior)> {
    let p = format!("dec.{layer}");
    let dc = &cfg.decoder;
    let dropout = cfg.dropout();
    let t = g.shape(h)[1];
    let causal = Mask::causal(t);
    let q = nn::layer_norm(g, &format!("{p}.self.ln"), h)?;
    let att = nn::attention(g, &format!("{p}.self"), q, q, dc.heads, Some(&causal), None, dropout)?;
    let s = g.dropout(att.out, dropout)?;
    let h = g.add(h, s)?;

    let (h, alpha) = think_xattn(g, &format!("{p}.think"), h, c, dc.heads, dropout)?;
    let prior = token_frame_prior(g, alpha, a, w_seg)?;
    let h = grounded_xattn(
        g,
        &format!("{p}.ground"),
        dc,
        h,
        e,
        frames,
        prior.w,
        cfg.routing.eps_num,
        dropout,
    )?;
    let h = nn::ffn_sublayer(g, &format!("{p}.ffn"), h, dropout)?;
    Ok((h, prior))
}

/// Logits `[B, T_t, |V|]` and each layer's prior.
#[allow(clippy::too_many_arguments)]
pub fn decode_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
    c: Var,
    e: Var,
    frames: &Frames,
    a: Var,
    w_seg: Var,
) -> Result<(Var, Vec<DecoderPrior>)> {
    if let Some(&bad) = tokens.inputs().iter().flatten().find(|&&id| id >= cfg.decoder.vocab_size) {
        return Err(Error::input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.decoder.vocab_size
        )));
    }
    let mut h = embed_tokens(g, tokens, cfg.dropout())?;
    let mut priors = Vec::with_capacity(cfg.decoder.layers);
    for l in 0..cfg.decoder.layers {
        let (next, prior) = decoder_layer(g, cfg, l, h, c, e, frames, a, w_seg)?;
        h = next;
        priors.push(prior);
    }
    let h = nn::layer_norm(g, "dec.out.ln", h)?;
    Ok((nn::linear(g, "dec.out", h, true)?, priors))
}

/// Last position's logits as a plain vector (for step-wise decoding).
pub fn last_logits(g: &Graph, logits: Var, sample: usize) -> Vec<f64> {
    let v: &Tensor = g.value(logits);
    let (t, n) = (v.shape()[1], v.shape()[2]);
    let start = (sample * t + t - 1) * n;
    v.data()[start..start + n].to_vec()
}
