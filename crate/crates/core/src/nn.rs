//! Shared layer building blocks and parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thoughtroute_autodiff::{Graph, Mask, ParameterStore, Tensor, Var};

use crate::config::LAYER_NORM_EPS;
use crate::error::Result;

/// Fixed sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(..)`.
pub fn sinusoidal(len: usize, d: usize) -> Tensor {
    Tensor::from_fn([len, d], |idx| {
        let (t, c) = (idx / d, idx % d);
        let pair = (c - c % 2) as f64;
        let angle = t as f64 / 10000f64.powf(pair / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `x · W (+ b)` with parameters `{prefix}.w` and optionally `{prefix}.b`.
pub fn linear(g: &mut Graph, prefix: &str, x: Var, bias: bool) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    if bias {
        let b = g.param(&format!("{prefix}.b"))?;
        Ok(g.add(y, b)?)
    } else {
        Ok(y)
    }
}

/// Layer norm with parameters `{prefix}.g` and `{prefix}.b`.
pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
}

/// `[B, T, d] -> [B, H, T, d/H]`.
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

/// `[B, H, T, dh] -> [B, T, H*dh]`.
pub fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(p, &[s[0], s[2], s[1] * s[3]])?)
}

pub struct Attended {
    /// `[B, T_q, d]` after the output projection.
    pub out: Var,
    /// `[B, H, T_q, T_k]` attention weights before dropout.
    pub weights: Var,
}

/// Multi-head attention with bias-free projections `{prefix}.wq/wk/wv/wo`.
///
/// `bias` is added to the scaled logits and must broadcast to
/// `[B, H, T_q, T_k]`; `mask` is applied after it.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    prefix: &str,
    query: Var,
    source: Var,
    heads: usize,
    mask: Option<&Mask>,
    bias: Option<Var>,
    dropout: f64,
) -> Result<Attended> {
    let d = *g.shape(query).last().unwrap();
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let q = linear(g, &format!("{prefix}.wq"), query, false)?;
    let k = linear(g, &format!("{prefix}.wk"), source, false)?;
    let v = linear(g, &format!("{prefix}.wv"), source, false)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.permute(k, &[0, 1, 3, 2])?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.mul_scalar(logits, scale)?;
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    let weights = g.masked_softmax(logits, mask)?;
    let dropped = g.dropout(weights, dropout)?;
    let ctx = g.matmul(dropped, v)?;
    let ctx = merge_heads(g, ctx)?;
    let out = linear(g, &format!("{prefix}.wo"), ctx, false)?;
    Ok(Attended { out, weights })
}

/// Position-wise `d -> 4d -> d` with ReLU.
pub fn feed_forward(g: &mut Graph, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.l1"), x, true)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, dropout)?;
    linear(g, &format!("{prefix}.l2"), h, true)
}

/// `x + Dropout(FFN(LN(x)))`.
pub fn ffn_sublayer(g: &mut Graph, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
    let h = layer_norm(g, &format!("{prefix}.ln"), x)?;
    let h = feed_forward(g, prefix, h, dropout)?;
    let h = g.dropout(h, dropout)?;
    Ok(g.add(x, h)?)
}

/// Mean over axis 1 of a `[B, H, ...]` tensor, keeping the axis.
pub fn mean_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let h = g.shape(x)[1];
    let s = g.sum_axis(x, 1)?;
    Ok(g.mul_scalar(s, 1.0 / h as f64)?)
}

/// Registers freshly initialized parameters.
///
/// Weight matrices use Xavier-uniform with gain 1, biases start at zero and
/// layer-norm gains at one.
pub struct Init<'a> {
    pub store: &'a mut ParameterStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn xavier(&mut self, name: String, rows: usize, cols: usize) -> Result<()> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn([rows, cols], |_| rng.gen_range(-a..a));
        Ok(self.store.insert(name, t)?)
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Result<()> {
        Ok(self.store.insert(name, Tensor::full(shape.to_vec(), value))?)
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        self.xavier(format!("{prefix}.w"), fan_in, fan_out)?;
        if bias {
            self.fill(format!("{prefix}.b"), &[fan_out], 0.0)?;
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.fill(format!("{prefix}.g"), &[d], 1.0)?;
        self.fill(format!("{prefix}.b"), &[d], 0.0)
    }

    /// Pre-norm attention sublayer: `{prefix}.ln` plus the four projections.
    pub fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln"), d)?;
        for p in ["wq", "wk", "wv", "wo"] {
            self.linear(&format!("{prefix}.{p}"), d, d, false)?;
        }
        Ok(())
    }

    pub fn ffn(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln"), d)?;
        self.linear(&format!("{prefix}.l1"), d, 4 * d, true)?;
        self.linear(&format!("{prefix}.l2"), 4 * d, d, true)
    }
}
