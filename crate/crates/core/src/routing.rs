//! Thought-to-segment binding by Sinkhorn normalization.

use thoughtroute_autodiff::{Graph, Tensor, Var};

use crate::config::RoutingConfig;
use crate::error::Result;
use crate::nn::{self, Init};

/// Graph nodes for one layer's routing.
#[derive(Clone, Copy, Debug)]
pub struct Routing {
    /// `[B, K, M]` raw similarities.
    pub g: Var,
    /// `[B, K, M]` binding: rows sum to 1, columns to about `K/M`.
    pub a: Var,
    /// `[B, K, d]` routed segment summaries.
    pub p: Var,
    /// `[B, K, T_s]` per-thought temporal prior.
    pub r: Var,
}

pub fn init(init: &mut Init, prefix: &str, d: usize) -> Result<()> {
    init.linear(&format!("{prefix}.wq"), d, d, false)?;
    init.linear(&format!("{prefix}.wk"), d, d, false)
}

/// `−η((k/K) − (j/M))²` with 1-based `k`, `j`.
pub fn monotonic_bias(k: usize, m: usize, eta: f64) -> Tensor {
    Tensor::from_fn([k, m], |i| {
        let (a, b) = ((i / m + 1) as f64 / k as f64, (i % m + 1) as f64 / m as f64);
        -eta * (a - b).powi(2)
    })
}

/// `G_{k,j} = (W_q c_k)·(W_k S_j) / √d`, plus the optional monotonic bias.
pub fn similarity(g: &mut Graph, prefix: &str, c: Var, s: Var, cfg: &RoutingConfig) -> Result<Var> {
    let d = g.shape(c)[2];
    let q = nn::linear(g, &format!("{prefix}.wq"), c, false)?;
    let k = nn::linear(g, &format!("{prefix}.wk"), s, false)?;
    let kt = g.permute(k, &[0, 2, 1])?;
    let raw = g.matmul(q, kt)?;
    let scores = g.mul_scalar(raw, 1.0 / (d as f64).sqrt())?;
    if cfg.monotonic_bias_eta > 0.0 {
        let (kk, mm) = (g.shape(c)[1], g.shape(s)[1]);
        let bias = g.constant(monotonic_bias(kk, mm, cfg.monotonic_bias_eta))?;
        Ok(g.add(scores, bias)?)
    } else {
        Ok(scores)
    }
}

/// Alternating row/column rescaling of `exp(G)`, ending with a row pass.
///
/// The row max is subtracted before exponentiation; it is treated as a
/// constant since every row is renormalized afterwards.
pub fn sinkhorn(g: &mut Graph, scores: Var, iters: usize) -> Result<Var> {
    let v = g.value(scores);
    let (k, m) = (v.shape()[v.rank() - 2], v.shape()[v.rank() - 1]);
    let mut shift_shape = v.shape().to_vec();
    *shift_shape.last_mut().unwrap() = 1;
    let maxes: Vec<f64> = v
        .data()
        .chunks(m)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = g.constant(Tensor::new(shift_shape, maxes)?)?;
    let centred = g.sub(scores, shift)?;
    let mut a = g.exp(centred)?;
    let axis = g.shape(a).len() - 1;
    let budget = k as f64 / m as f64;
    for _ in 0..iters {
        let rows = g.sum_axis(a, axis)?;
        a = g.div(a, rows)?;
        let cols = g.sum_axis(a, axis - 1)?;
        let cols = g.mul_scalar(cols, 1.0 / budget)?;
        a = g.div(a, cols)?;
    }
    let rows = g.sum_axis(a, axis)?;
    Ok(g.div(a, rows)?)
}

/// Similarity, binding, summaries `p = A·S` and prior `r = A·W_seg`.
pub fn route(g: &mut Graph, prefix: &str, c: Var, s: Var, w_seg: Var, cfg: &RoutingConfig) -> Result<Routing> {
    let scores = similarity(g, prefix, c, s, cfg)?;
    let a = sinkhorn(g, scores, cfg.sinkhorn_iters)?;
    let p = g.matmul(a, s)?;
    let r = g.matmul(a, w_seg)?;
    Ok(Routing { g: scores, a, p, r })
}
