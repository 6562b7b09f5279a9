//! Frame encoder: projection, positional encoding and convolution-augmented blocks.

use thoughtroute_autodiff::{Graph, Mask, Var};

use crate::batch::ClipBatch;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Init};

/// Graph-side view of a clip's padding.
pub struct Frames {
    /// `[B, T_s, 1]` validity column, `None` when nothing is padded.
    pub valid: Option<Var>,
    /// Key mask `[B, 1, 1, T_s]`, `None` when nothing is padded.
    pub key_mask: Option<Mask>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl Frames {
    pub fn new(g: &mut Graph, clip: &ClipBatch) -> Result<Self> {
        let padded = clip.lengths().iter().any(|&l| l < clip.max_len());
        let (valid, key_mask) = if padded {
            (Some(g.constant(clip.valid_column())?), Some(clip.key_mask()))
        } else {
            (None, None)
        };
        Ok(Self {
            valid,
            key_mask,
            lengths: clip.lengths().to_vec(),
            max_len: clip.max_len(),
        })
    }

    /// Zeroes rows at padded frames.
    pub fn zero_pad(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.valid {
            Some(v) => Ok(g.mul(x, v)?),
            None => Ok(x),
        }
    }
}

pub fn init(init: &mut Init, cfg: &EncoderConfig) -> Result<()> {
    let d = cfg.d_model;
    init.linear("enc.embed", cfg.d_x, d, true)?;
    init.layer_norm("enc.embed.ln", d)?;
    for l in 0..cfg.layers {
        init.attention(&format!("enc.{l}.attn"), d)?;
        init.layer_norm(&format!("enc.{l}.conv.ln"), d)?;
        init.xavier(format!("enc.{l}.conv.w"), d, cfg.conv_kernel)?;
        init.fill(format!("enc.{l}.conv.b"), &[d], 0.0)?;
        init.ffn(&format!("enc.{l}.ffn"), d)?;
    }
    Ok(())
}

/// `Dropout(LayerNorm(X W_e + b_e))` with padded rows zeroed.
pub fn embed_frames(g: &mut Graph, cfg: &EncoderConfig, clip: &ClipBatch, frames: &Frames) -> Result<Var> {
    if clip.feature_dim() != cfg.d_x {
        return Err(Error::input(format!(
            "clip feature dim {} does not match d_x {}",
            clip.feature_dim(),
            cfg.d_x
        )));
    }
    let x = g.constant(clip.features().clone())?;
    let h = nn::linear(g, "enc.embed", x, true)?;
    let h = nn::layer_norm(g, "enc.embed.ln", h)?;
    let h = g.dropout(h, cfg.dropout)?;
    frames.zero_pad(g, h)
}

/// Adds the sinusoidal table and re-zeroes padded rows.
pub fn add_positional(g: &mut Graph, x: Var, frames: &Frames) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let pe = g.constant(nn::sinusoidal(s[1], s[2]))?;
    let h = g.add(x, pe)?;
    frames.zero_pad(g, h)
}

/// Self-attention, depthwise convolution and FFN, each pre-normed and residual.
pub fn encoder_block(g: &mut Graph, cfg: &EncoderConfig, layer: usize, x: Var, frames: &Frames) -> Result<Var> {
    let p = format!("enc.{layer}");

    let h = nn::layer_norm(g, &format!("{p}.attn.ln"), x)?;
    let att = nn::attention(
        g,
        &format!("{p}.attn"),
        h,
        h,
        cfg.heads,
        frames.key_mask.as_ref(),
        None,
        cfg.dropout,
    )?;
    let a = g.dropout(att.out, cfg.dropout)?;
    let x = g.add(x, a)?;
    let x = frames.zero_pad(g, x)?;

    let h = nn::layer_norm(g, &format!("{p}.conv.ln"), x)?;
    let h = frames.zero_pad(g, h)?;
    let w = g.param(&format!("{p}.conv.w"))?;
    let b = g.param(&format!("{p}.conv.b"))?;
    let h = g.depthwise_conv1d(h, w, b)?;
    let h = frames.zero_pad(g, h)?;
    let h = g.dropout(h, cfg.dropout)?;
    let x = g.add(x, h)?;
    let x = frames.zero_pad(g, x)?;

    let x = nn::ffn_sublayer(g, &format!("{p}.ffn"), x, cfg.dropout)?;
    frames.zero_pad(g, x)
}

/// Evidence `E [B, T_s, d]`; rows at padded frames are exactly zero.
pub fn encode(g: &mut Graph, cfg: &EncoderConfig, clip: &ClipBatch, frames: &Frames) -> Result<Var> {
    let h = embed_frames(g, cfg, clip, frames)?;
    let mut h = add_positional(g, h, frames)?;
    for l in 0..cfg.layers {
        h = encoder_block(g, cfg, l, h, frames)?;
    }
    Ok(h)
}
