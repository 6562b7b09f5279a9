//! Routing interpretability metrics and translation scores.

use std::collections::HashMap;

use thoughtroute_autodiff::Tensor;

use crate::config::EPS_NUM;

fn rows(a: &Tensor) -> impl Iterator<Item = &[f64]> {
    let m = *a.shape().last().expect("matrix");
    a.data().chunks(m)
}

fn k_of(a: &Tensor) -> usize {
    a.shape()[a.rank() - 2]
}

/// Mean over thoughts of `−Σ_j A_{k,j} log(A_{k,j} + ε)`.
pub fn thought_entropy(a: &Tensor) -> f64 {
    let n = a.numel() / a.shape()[a.rank() - 1];
    rows(a)
        .map(|r| -r.iter().map(|&v| v * (v + EPS_NUM).ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

/// `μ_k = Σ_j j A_{k,j}` (1-based `j`) for a single `[K, M]` binding.
pub fn expected_indices(a: &Tensor) -> Vec<f64> {
    rows(a)
        .map(|r| r.iter().enumerate().map(|(j, &v)| (j + 1) as f64 * v).sum())
        .collect()
}

/// Fraction of adjacent thought pairs with `μ_k > μ_{k+1}`; 0 when `K = 1`.
pub fn mono_violation_rate(a: &Tensor) -> f64 {
    let k = k_of(a);
    if k < 2 {
        return 0.0;
    }
    let mu = expected_indices(a);
    let per = mu.chunks(k);
    let count = per.len();
    per.map(|mu| mu.windows(2).filter(|w| w[0] > w[1]).count() as f64 / (k - 1) as f64)
        .sum::<f64>()
        / count as f64
}

/// Smallest 1-based index whose inclusive cumulative mass reaches `p`.
pub fn quantile_index(row: &[f64], p: f64) -> usize {
    let mut acc = 0.0;
    for (j, &v) in row.iter().enumerate() {
        acc += v;
        if acc >= p {
            return j + 1;
        }
    }
    row.len()
}

/// Mean over thoughts of `j(p_hi) − j(p_lo)`.
pub fn span(a: &Tensor, p_lo: f64, p_hi: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for r in rows(a) {
        total += (quantile_index(r, p_hi) as f64) - (quantile_index(r, p_lo) as f64);
        n += 1;
    }
    total / n as f64
}

/// Mean over thoughts of `Σ_j |A_{k,j} − A_{k,j−1}|`.
pub fn total_variation(a: &Tensor) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for r in rows(a) {
        total += r.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        n += 1;
    }
    total / n as f64
}

/// Interpretability summary of one or more bindings.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InterpReport {
    pub entropy: f64,
    pub mono_viol: f64,
    pub span: f64,
    pub tv: f64,
}

impl InterpReport {
    /// Metrics of a `[K, M]` or `[B, K, M]` binding, averaged over samples.
    pub fn of(a: &Tensor) -> Self {
        Self {
            entropy: thought_entropy(a),
            mono_viol: mono_violation_rate(a),
            span: span(a, 0.05, 0.95),
            tv: total_variation(a),
        }
    }

    /// Unweighted mean of per-sample reports.
    pub fn mean(reports: &[InterpReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut out = Self::default();
        for r in reports {
            out.entropy += r.entropy / n;
            out.mono_viol += r.mono_viol / n;
            out.span += r.span / n;
            out.tv += r.tv / n;
        }
        out
    }
}

fn ngrams(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Zero n-gram precisions are replaced by this before taking logs.
pub const BLEU_SMOOTHING: f64 = 1e-9;

/// Corpus BLEU-1..=`max_n` (cumulative, uniform weights) with clipped
/// counts and a brevity penalty when the hypotheses are shorter.
pub fn bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Vec<f64> {
    assert_eq!(hyps.len(), refs.len(), "one reference per hypothesis");
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return vec![0.0; max_n];
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (h, rf) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let hc = ngrams(h, n);
            let rc = ngrams(rf, n);
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    let mut log_sum = 0.0;
    (1..=max_n)
        .map(|n| {
            let p = if totals[n - 1] == 0 {
                0.0
            } else {
                matches[n - 1] as f64 / totals[n - 1] as f64
            };
            log_sum += if p > 0.0 { p.ln() } else { BLEU_SMOOTHING.ln() };
            bp * (log_sum / n as f64).exp()
        })
        .collect()
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 of one hypothesis against one reference.
pub fn rouge_l(hyp: &[usize], reference: &[usize]) -> f64 {
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranslationScores {
    /// BLEU-1..4.
    pub bleu: [f64; 4],
    /// Mean sentence ROUGE-L F1.
    pub rouge_l: f64,
}

impl TranslationScores {
    pub fn compute(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Self {
        let b = bleu(hyps, refs, 4);
        let rouge = if hyps.is_empty() {
            0.0
        } else {
            hyps.iter().zip(refs).map(|(h, r)| rouge_l(h, r)).sum::<f64>() / hyps.len() as f64
        };
        Self {
            bleu: [b[0], b[1], b[2], b[3]],
            rouge_l: rouge,
        }
    }
}

/// Hit and count of thoughts whose prior peaks inside their own segment.
///
/// `r` is `[K, T]` with at least `frame_to_segment.len()` columns. For each
/// thought `k < min(K, n_segments)` the first frame maximizing `r_{k,t}`
/// over valid frames counts as a hit when it belongs to true segment `k`.
pub fn purity_counts(r: &Tensor, frame_to_segment: &[usize], n_segments: usize) -> (usize, usize) {
    let t = r.shape()[1];
    let valid = frame_to_segment.len().min(t);
    let k = r.shape()[0].min(n_segments);
    let mut hits = 0;
    for kk in 0..k {
        let row = &r.row(kk)[..valid];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if frame_to_segment[best] == kk {
            hits += 1;
        }
    }
    (hits, k)
}

/// Purity of one sample's temporal prior `r = A·W_seg`.
pub fn alignment_purity(a: &Tensor, w_seg: &Tensor, frame_to_segment: &[usize], n_segments: usize) -> f64 {
    let r = matmul2(a, w_seg);
    let (h, n) = purity_counts(&r, frame_to_segment, n_segments);
    if n == 0 {
        0.0
    } else {
        h as f64 / n as f64
    }
}

/// Plain `[K, M] x [M, T]` product.
pub fn matmul2(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let t = b.shape()[1];
    assert_eq!(b.shape()[0], m, "inner dimensions");
    Tensor::from_fn([k, t], |i| {
        let (r, c) = (i / t, i % t);
        (0..m).map(|j| a.data()[r * m + j] * b.data()[j * t + c]).sum()
    })
}
