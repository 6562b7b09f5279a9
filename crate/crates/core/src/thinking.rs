//! Ordered latent thoughts refined by causal mixing and routed evidence reads.

use thoughtroute_autodiff::{Graph, Mask, Tensor, Var};

use crate::config::{ModelConfig, PriorLayer, ThinkConfig};
use crate::encoder::Frames;
use crate::error::Result;
use crate::nn::{self, Init};
use crate::routing::{self, Routing};
use crate::segmentation::Segmentation;

/// Result of [`think`].
#[derive(Clone, Debug)]
pub struct Thoughts {
    /// `[B, K, d]` final thought states.
    pub c: Var,
    /// Routing of every thinking layer, in order.
    pub routing: Vec<Routing>,
    /// Index into `routing` of the binding the decoder prior uses.
    pub prior_layer: usize,
}

impl Thoughts {
    /// Binding consumed by the decoder prior.
    pub fn prior_routing(&self) -> &Routing {
        &self.routing[self.prior_layer]
    }

    pub fn final_routing(&self) -> &Routing {
        self.routing.last().expect("at least one thinking layer")
    }
}

pub fn init(init: &mut Init, cfg: &ThinkConfig, d: usize) -> Result<()> {
    init.xavier("think.slots".into(), cfg.thoughts, d)?;
    for l in 0..cfg.layers {
        let p = format!("think.{l}");
        init.attention(&format!("{p}.self"), d)?;
        routing::init(init, &format!("{p}.route"), d)?;
        init.attention(&format!("{p}.xattn"), d)?;
        init.linear(&format!("{p}.xattn.wp"), d, d, false)?;
        init.linear(&format!("{p}.xattn.wb"), d, d, false)?;
        init.ffn(&format!("{p}.ffn"), d)?;
    }
    Ok(())
}

/// Learnable slots broadcast to `[B, K, d]`.
pub fn init_slots(g: &mut Graph, batch: usize) -> Result<Var> {
    let slots = g.param("think.slots")?;
    let s = g.shape(slots).to_vec();
    let slots = g.reshape(slots, &[1, s[0], s[1]])?;
    if batch == 1 {
        return Ok(slots);
    }
    let zeros = g.constant(Tensor::zeros([batch, 1, 1]))?;
    Ok(g.add(zeros, slots)?)
}

/// `C + Dropout(MHSA(LN(C)))` where thought `k` only sees thoughts `1..=k`.
pub fn causal_self_attn(g: &mut Graph, prefix: &str, c: Var, heads: usize, dropout: f64) -> Result<Var> {
    let k = g.shape(c)[1];
    let mask = Mask::causal(k);
    let h = nn::layer_norm(g, &format!("{prefix}.ln"), c)?;
    let att = nn::attention(g, prefix, h, h, heads, Some(&mask), None, dropout)?;
    let a = g.dropout(att.out, dropout)?;
    Ok(g.add(c, a)?)
}

/// Logit bias `λ_p (content + log(r + ε))` for routed cross-attention, or
/// `None` when it would be identically zero.
pub fn routed_bias(
    g: &mut Graph,
    prefix: &str,
    cfg: &ThinkConfig,
    e: Var,
    p: Var,
    r: Var,
    eps: f64,
) -> Result<Option<Var>> {
    if cfg.lambda_p == 0.0 || !(cfg.use_content_bias || cfg.use_log_prior_bias) {
        return Ok(None);
    }
    let mut bias = None;
    if cfg.use_content_bias {
        let d = g.shape(p)[2];
        let dh = d / cfg.heads;
        let pp = nn::linear(g, &format!("{prefix}.wp"), p, false)?;
        let pp = nn::split_heads(g, pp, cfg.heads)?;
        let eb = nn::linear(g, &format!("{prefix}.wb"), e, false)?;
        let eb = nn::split_heads(g, eb, cfg.heads)?;
        let ebt = g.permute(eb, &[0, 1, 3, 2])?;
        let c = g.matmul(pp, ebt)?;
        bias = Some(g.mul_scalar(c, 1.0 / (dh as f64).sqrt())?);
    }
    if cfg.use_log_prior_bias {
        let s = g.shape(r).to_vec();
        let lr = g.add_scalar(r, eps)?;
        let lr = g.log(lr)?;
        let lr = g.reshape(lr, &[s[0], 1, s[1], s[2]])?;
        bias = Some(match bias {
            Some(b) => g.add(b, lr)?,
            None => lr,
        });
    }
    let b = bias.expect("at least one bias term");
    Ok(Some(if cfg.lambda_p == 1.0 {
        b
    } else {
        g.mul_scalar(b, cfg.lambda_p)?
    }))
}

/// `C̃ + Dropout(XAttn(LN(C̃), E))` with the routed logit bias.
#[allow(clippy::too_many_arguments)]
pub fn routed_xattn(
    g: &mut Graph,
    prefix: &str,
    cfg: &ThinkConfig,
    c: Var,
    e: Var,
    frames: &Frames,
    route: &Routing,
    eps: f64,
    dropout: f64,
) -> Result<Var> {
    let bias = routed_bias(g, prefix, cfg, e, route.p, route.r, eps)?;
    let h = nn::layer_norm(g, &format!("{prefix}.ln"), c)?;
    let att = nn::attention(g, prefix, h, e, cfg.heads, frames.key_mask.as_ref(), bias, dropout)?;
    let a = g.dropout(att.out, dropout)?;
    Ok(g.add(c, a)?)
}

/// One refinement step; routing queries are the causally mixed thoughts.
pub fn think_layer(
    g: &mut Graph,
    cfg: &ModelConfig,
    layer: usize,
    c: Var,
    e: Var,
    frames: &Frames,
    seg: &Segmentation,
) -> Result<(Var, Routing)> {
    let p = format!("think.{layer}");
    let t = &cfg.think;
    let dropout = cfg.dropout();
    let ct = causal_self_attn(g, &format!("{p}.self"), c, t.heads, dropout)?;
    let route = routing::route(g, &format!("{p}.route"), ct, seg.s, seg.w_seg, &cfg.routing)?;
    let ch = routed_xattn(
        g,
        &format!("{p}.xattn"),
        t,
        ct,
        e,
        frames,
        &route,
        cfg.routing.eps_num,
        dropout,
    )?;
    let out = nn::ffn_sublayer(g, &format!("{p}.ffn"), ch, dropout)?;
    Ok((out, route))
}

/// Runs all thinking layers from the learnable slots.
pub fn think(g: &mut Graph, cfg: &ModelConfig, e: Var, frames: &Frames, seg: &Segmentation) -> Result<Thoughts> {
    let mut c = init_slots(g, frames.lengths.len())?;
    let mut routes = Vec::with_capacity(cfg.think.layers);
    for l in 0..cfg.think.layers {
        let (next, route) = think_layer(g, cfg, l, c, e, frames, seg)?;
        c = next;
        routes.push(route);
    }
    let prior_layer = match cfg.decoder.prior_layer {
        PriorLayer::First => 0,
        PriorLayer::Final => routes.len() - 1,
    };
    Ok(Thoughts {
        c,
        routing: routes,
        prior_layer,
    })
}
