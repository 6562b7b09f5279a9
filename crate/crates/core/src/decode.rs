//! Greedy and beam search over next-token log-probabilities.

use std::cmp::Ordering;

use thoughtroute_autodiff::{Graph, ParameterStore};

use crate::batch::{ClipBatch, TokenBatch, BOS, EOS, PAD};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model;

/// Natural-log softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|&v| v - lse).collect()
}

/// `((5 + len) / 6)^a`.
pub fn length_penalty(len: usize, a: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(a)
}

fn allowed(id: usize) -> bool {
    id != PAD && id != BOS
}

/// Argmax decoding from BOS. `next` maps a prefix (starting with BOS) to
/// log-probabilities over the vocabulary. The returned tokens exclude BOS
/// and the terminating EOS.
pub fn greedy<F>(mut next: F, max_len: usize) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut prefix = vec![BOS];
    for _ in 0..max_len {
        let lp = next(&prefix)?;
        let mut best = None;
        for (id, &v) in lp.iter().enumerate() {
            if allowed(id) && best.is_none_or(|(_, b)| v > b) {
                best = Some((id, v));
            }
        }
        let (id, _) = best.ok_or_else(|| Error::input("vocabulary has no emittable tokens"))?;
        if id == EOS {
            break;
        }
        prefix.push(id);
    }
    prefix.remove(0);
    Ok(prefix)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Beam search with `b` hypotheses; finished hypotheses are ranked by
/// `log P / ((5 + len) / 6)^a` where `len` counts EOS. Search stops once
/// `b` hypotheses have finished or `max_len` tokens were produced.
pub fn beam<F>(mut next: F, b: usize, a: f64, max_len: usize) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if !(1..=64).contains(&b) {
        return Err(Error::input(format!("beam size {b} outside 1..=64")));
    }
    let mut alive = vec![Hyp {
        tokens: vec![BOS],
        logp: 0.0,
    }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<Hyp> = Vec::new();
        for h in &alive {
            let lp = next(&h.tokens)?;
            for (id, &v) in lp.iter().enumerate() {
                if allowed(id) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(id);
                    cands.push(Hyp {
                        tokens,
                        logp: h.logp + v,
                    });
                }
            }
        }
        cands.sort_by(|x, y| better((x.logp, &x.tokens), (y.logp, &y.tokens)));
        alive.clear();
        for c in cands.into_iter().take(b) {
            if *c.tokens.last().unwrap() == EOS {
                let len = c.tokens.len() - 1;
                finished.push((c.logp / length_penalty(len, a), c.tokens));
            } else {
                alive.push(c);
            }
        }
        if finished.len() >= b || alive.is_empty() {
            break;
        }
    }
    for h in alive {
        let len = h.tokens.len() - 1;
        finished.push((h.logp / length_penalty(len, a), h.tokens));
    }
    finished.sort_by(|x, y| better((x.0, &x.1), (y.0, &y.1)));
    let mut best = finished.into_iter().next().map(|f| f.1).unwrap_or_else(|| vec![BOS]);
    best.remove(0);
    if best.last() == Some(&EOS) {
        best.pop();
    }
    Ok(best)
}

/// Decoding strategy for [`translate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    pub len_penalty: f64,
    pub max_len: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam: 1,
            len_penalty: 0.0,
            max_len: 16,
        }
    }
}

/// Decodes one clip (batch size 1). Beam 1 runs the greedy path.
pub fn translate(store: &ParameterStore, cfg: &ModelConfig, clip: &ClipBatch, search: &SearchConfig) -> Result<Vec<usize>> {
    if clip.batch_size() != 1 {
        return Err(Error::input("translate expects a single clip"));
    }
    let mut g = Graph::with_store(store);
    let enc = model::encode(&mut g, cfg, clip)?;
    let mut next = |prefix: &[usize]| -> Result<Vec<f64>> {
        let tokens = TokenBatch::from_inputs(vec![prefix.to_vec()])?;
        let (logits, _) = model::decode(&mut g, cfg, &enc, &tokens)?;
        Ok(log_softmax(&crate::decoder::last_logits(&g, logits, 0)))
    };
    if search.beam == 1 && search.len_penalty == 0.0 {
        greedy(next, search.max_len)
    } else {
        beam(&mut next, search.beam, search.len_penalty, search.max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eos_first_gives_empty() {
        let out = greedy(|_| Ok(vec![0.0, 0.0, 5.0, 1.0]), 10).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let out = greedy(
            |p| {
                Ok(if p.len() < 3 {
                    vec![9.0, 9.0, -1.0, 2.0, 2.0]
                } else {
                    vec![0.0, 0.0, 1.0, 0.0, 0.0]
                })
            },
            10,
        )
        .unwrap();
        assert_eq!(out, vec![3, 3]);
    }

    #[test]
    fn penalty_values() {
        assert_eq!(length_penalty(1, 0.0), 1.0);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-15);
    }
}
