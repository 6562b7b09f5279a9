//! Soft temporal segmentation with learnable boundaries.

use thoughtroute_autodiff::{Graph, Tensor, Var};

use crate::batch::ClipBatch;
use crate::config::SegmentationConfig;
use crate::encoder::Frames;
use crate::error::Result;
use crate::nn::{self, Init};

/// Graph nodes produced by [`segment`].
#[derive(Clone, Copy, Debug)]
pub struct Segmentation {
    /// `[B, d]` masked mean of the evidence.
    pub z: Var,
    /// `[B, M]` positive segment lengths.
    pub rho: Var,
    /// `[B, M]` length proportions.
    pub pi: Var,
    /// `[B, M+1]` boundaries in 1-based valid-frame time.
    pub tau: Var,
    /// `[B, M, T_s]` row-stochastic membership.
    pub w_seg: Var,
    /// `[B, M, d]` segment tokens.
    pub s: Var,
}

pub fn init(init: &mut Init, cfg: &SegmentationConfig, d: usize, hidden: usize) -> Result<()> {
    init.linear("seg.l1", d, hidden, true)?;
    init.linear("seg.l2", hidden, cfg.segments, true)
}

fn per_sample(clip_lengths: &[usize], f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_fn([clip_lengths.len(), 1], |b| f(clip_lengths[b] as f64))
}

/// `z = Σ m_t e_t / (L_valid + ε)`.
pub fn masked_mean_pool(g: &mut Graph, e: Var, frames: &Frames, eps: f64) -> Result<Var> {
    let e = frames.zero_pad(g, e)?;
    let s = g.sum_axis(e, 1)?;
    let d = g.shape(e)[2];
    let s = g.reshape(s, &[frames.lengths.len(), d])?;
    let inv = g.constant(per_sample(&frames.lengths, |l| 1.0 / (l + eps)))?;
    Ok(g.mul(s, inv)?)
}

/// `ρ = softplus(MLP(z))` and `π = ρ / (Σρ + ε)`.
pub fn boundary_lengths(g: &mut Graph, z: Var, eps: f64) -> Result<(Var, Var)> {
    let h = nn::linear(g, "seg.l1", z, true)?;
    let h = g.relu(h)?;
    let o = nn::linear(g, "seg.l2", h, true)?;
    let rho = g.softplus(o)?;
    let total = g.sum_axis(rho, 1)?;
    let total = g.add_scalar(total, eps)?;
    let pi = g.div(rho, total)?;
    Ok((rho, pi))
}

/// `τ_0 = 1`, `τ_j = 1 + (L_valid − 1) Σ_{i≤j} π_i`.
pub fn boundaries(g: &mut Graph, pi: Var, lengths: &[usize]) -> Result<Var> {
    let cum = g.cumsum(pi)?;
    let span = g.constant(per_sample(lengths, |l| l - 1.0))?;
    let scaled = g.mul(cum, span)?;
    let rest = g.add_scalar(scaled, 1.0)?;
    let first = g.constant(Tensor::ones([lengths.len(), 1]))?;
    Ok(g.concat(&[first, rest], 1)?)
}

/// Soft window membership, masked and row-normalized.
///
/// `u_{j,t} = σ(γ(t̂ − τ_{j−1})) − σ(γ(t̂ − τ_j))` at valid frames. Each row
/// also receives `ε / L_valid` spread over its valid frames before dividing
/// by `Σ_t u + ε`, so rows sum to one even when a window collapses.
pub fn membership(g: &mut Graph, tau: Var, clip: &ClipBatch, cfg: &SegmentationConfig) -> Result<Var> {
    let (b, t) = (clip.batch_size(), clip.max_len());
    let m = g.shape(tau)[1] - 1;
    let ranks = clip.frame_ranks().reshape([b, 1, t])?;
    let ranks = g.constant(ranks)?;
    let lo = g.narrow(tau, 1, 0, m)?;
    let lo = g.reshape(lo, &[b, m, 1])?;
    let hi = g.narrow(tau, 1, 1, m)?;
    let hi = g.reshape(hi, &[b, m, 1])?;

    let da = g.sub(ranks, lo)?;
    let da = g.mul_scalar(da, cfg.gamma)?;
    let sa = g.sigmoid(da)?;
    let db = g.sub(ranks, hi)?;
    let db = g.mul_scalar(db, cfg.gamma)?;
    let sb = g.sigmoid(db)?;
    let u = g.sub(sa, sb)?;

    let padded = clip.lengths().iter().any(|&l| l < t);
    let u = if padded {
        let mask = g.constant(clip.mask().clone().reshape([b, 1, t])?)?;
        g.mul(u, mask)?
    } else {
        u
    };
    let eps = cfg.eps_num;
    let floor = Tensor::from_fn([b, 1, t], |i| {
        let (s, f) = (i / t, i % t);
        let l = clip.lengths()[s];
        if f < l {
            eps / l as f64
        } else {
            0.0
        }
    });
    let floor = g.constant(floor)?;
    let num = g.add(u, floor)?;
    let den = g.sum_axis(u, 2)?;
    let den = g.add_scalar(den, eps)?;
    Ok(g.div(num, den)?)
}

/// Full segmentation of the evidence `e [B, T_s, d]`.
pub fn segment(
    g: &mut Graph,
    cfg: &SegmentationConfig,
    clip: &ClipBatch,
    frames: &Frames,
    e: Var,
) -> Result<Segmentation> {
    let z = masked_mean_pool(g, e, frames, cfg.eps_num)?;
    let (rho, pi) = boundary_lengths(g, z, cfg.eps_num)?;
    let tau = boundaries(g, pi, clip.lengths())?;
    let w_seg = membership(g, tau, clip, cfg)?;
    let s = g.matmul(w_seg, e)?;
    Ok(Segmentation {
        z,
        rho,
        pi,
        tau,
        w_seg,
        s,
    })
}
