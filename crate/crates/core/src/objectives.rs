//! Label-smoothed cross-entropy and the ordering/contiguity penalties on `A`.

use thoughtroute_autodiff::{Graph, Tensor, Var};

use crate::batch::{TokenBatch, PAD};
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::model::Forward;

/// Scalar loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub ce: Var,
    pub mono: Var,
    pub cont: Var,
    pub total: Var,
}

/// The same terms as numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub ce: f64,
    pub mono: f64,
    pub cont: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            ce: g.value(self.ce).item(),
            mono: g.value(self.mono).item(),
            cont: g.value(self.cont).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Denominators applied to the summed terms. Training splits a batch into
/// per-sample graphs, so the batch-wide counts are passed in explicitly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizers {
    /// Non-PAD target positions in the whole batch.
    pub tokens: usize,
    /// Samples in the whole batch.
    pub samples: usize,
}

impl Normalizers {
    pub fn of(tokens: &TokenBatch) -> Self {
        Self {
            tokens: tokens.token_count(),
            samples: tokens.batch_size(),
        }
    }
}

/// Smoothed target distribution for one label: `1 − s` on the label and
/// `s / (|V| − 2)` on every other id except PAD.
pub fn smoothed_target(label: usize, vocab: usize, s: f64) -> Vec<f64> {
    let other = if vocab > 2 { s / (vocab - 2) as f64 } else { 0.0 };
    (0..vocab)
        .map(|v| match v {
            _ if v == label => 1.0 - s,
            PAD => 0.0,
            _ => other,
        })
        .collect()
}

/// `log softmax` over the last axis.
pub fn log_softmax(g: &mut Graph, x: Var) -> Result<Var> {
    let v = g.value(x);
    let rank = v.rank();
    let n = *v.shape().last().unwrap();
    let mut shape = v.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    let maxes: Vec<f64> = v
        .data()
        .chunks(n)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = g.constant(Tensor::new(shape, maxes)?)?;
    let centred = g.sub(x, shift)?;
    let ex = g.exp(centred)?;
    let sum = g.sum_axis(ex, rank - 1)?;
    let lse = g.log(sum)?;
    Ok(g.sub(centred, lse)?)
}

/// Summed smoothed cross-entropy over non-PAD labels, divided by `count`.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, labels: &[Vec<usize>], smoothing: f64, count: usize) -> Result<Var> {
    if count == 0 {
        return Err(Error::input("no non-PAD target positions"));
    }
    let shape = g.shape(logits).to_vec();
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    if labels.len() != b || labels.iter().any(|l| l.len() != t) {
        return Err(Error::input("labels do not match logits"));
    }
    let mut q = vec![0.0; b * t * v];
    for (i, &lab) in labels.iter().flatten().enumerate() {
        if lab >= v {
            return Err(Error::input(format!("label {lab} outside vocabulary of {v}")));
        }
        if lab != PAD {
            q[i * v..(i + 1) * v].copy_from_slice(&smoothed_target(lab, v, smoothing));
        }
    }
    let q = g.constant(Tensor::new(shape, q)?)?;
    let lp = log_softmax(g, logits)?;
    let prod = g.mul(q, lp)?;
    let s = g.sum_all(prod)?;
    Ok(g.mul_scalar(s, -1.0 / count as f64)?)
}

/// `μ_k = Σ_j j A_{k,j}` with 1-based `j`, shape `[B, K]`.
pub fn expected_index(g: &mut Graph, a: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let m = s[2];
    let idx = g.constant(Tensor::from_fn([m, 1], |j| (j + 1) as f64))?;
    let mu = g.matmul(a, idx)?;
    Ok(g.reshape(mu, &[s[0], s[1]])?)
}

/// `Σ_b Σ_k ReLU(μ_k − μ_{k+1} + δ)`, divided by `samples`.
pub fn mono_loss(g: &mut Graph, a: Var, delta: f64, samples: usize) -> Result<Var> {
    let k = g.shape(a)[1];
    if k < 2 {
        return Ok(g.constant(Tensor::scalar(0.0))?);
    }
    let mu = expected_index(g, a)?;
    let head = g.narrow(mu, 1, 0, k - 1)?;
    let tail = g.narrow(mu, 1, 1, k - 1)?;
    let diff = g.sub(head, tail)?;
    let diff = g.add_scalar(diff, delta)?;
    let viol = g.relu(diff)?;
    let s = g.sum_all(viol)?;
    Ok(g.mul_scalar(s, 1.0 / samples as f64)?)
}

/// `Σ_b Σ_k Σ_j |A_{k,j} − A_{k,j−1}|`, divided by `samples · K`.
pub fn cont_loss(g: &mut Graph, a: Var, samples: usize) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let (k, m) = (s[1], s[2]);
    if m < 2 {
        return Ok(g.constant(Tensor::scalar(0.0))?);
    }
    let head = g.narrow(a, 2, 0, m - 1)?;
    let tail = g.narrow(a, 2, 1, m - 1)?;
    let diff = g.sub(tail, head)?;
    let tv = g.abs(diff)?;
    let total = g.sum_all(tv)?;
    Ok(g.mul_scalar(total, 1.0 / (samples * k) as f64)?)
}

/// `ce + λ_mono·mono + λ_cont·cont`.
pub fn combine(g: &mut Graph, ce: Var, mono: Var, cont: Var, cfg: &LossConfig) -> Result<LossBreakdown> {
    let wm = g.mul_scalar(mono, cfg.lambda_mono)?;
    let wc = g.mul_scalar(cont, cfg.lambda_cont)?;
    let t = g.add(ce, wm)?;
    let total = g.add(t, wc)?;
    Ok(LossBreakdown { ce, mono, cont, total })
}

/// Full objective for a teacher-forced pass. The penalties use the last
/// thinking layer's binding, or every layer's when `regularize_all_layers`.
pub fn total_loss(g: &mut Graph, fwd: &Forward, tokens: &TokenBatch, cfg: &LossConfig, norm: Normalizers) -> Result<LossBreakdown> {
    let ce = label_smoothed_ce(g, fwd.logits, tokens.labels(), cfg.label_smoothing, norm.tokens)?;
    let routes = &fwd.encoded.thoughts.routing;
    let chosen: Vec<_> = if cfg.regularize_all_layers {
        routes.iter().collect()
    } else {
        routes.last().into_iter().collect()
    };
    let mut mono = None;
    let mut cont = None;
    for r in chosen {
        let m = mono_loss(g, r.a, cfg.delta, norm.samples)?;
        let c = cont_loss(g, r.a, norm.samples)?;
        mono = Some(match mono {
            Some(prev) => g.add(prev, m)?,
            None => m,
        });
        cont = Some(match cont {
            Some(prev) => g.add(prev, c)?,
            None => c,
        });
    }
    combine(g, ce, mono.expect("one layer"), cont.expect("one layer"), cfg)
}
