mod common;

use common::*;
use thoughtroute::autodiff::{grad_check, Graph, ParameterStore, Tensor};
use thoughtroute::batch::{BOS, EOS, PAD};
use thoughtroute::config::DecoderConfig;
use thoughtroute::decode::{beam, greedy, length_penalty, log_softmax, translate, SearchConfig};
use thoughtroute::decoder::{decoder_layer, embed_tokens, grounded_xattn, think_xattn, token_frame_prior};
use thoughtroute::encoder::Frames;
use thoughtroute::nn::sinusoidal;
use thoughtroute::{model, ClipBatch, TokenBatch};

const EPS: f64 = 1e-6;

fn normalize_rows(m: &mut Mat, valid: usize) {
    for row in m.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j < valid { v.abs() + 0.01 } else { 0.0 };
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn stochastic(seed: u64, rows: usize, cols: usize, valid: usize) -> Mat {
    let mut r = rng(seed);
    let mut m = to_mat(&random_tensor(&mut r, &[rows, cols], 1.0));
    normalize_rows(&mut m, valid);
    m
}

fn tensor3(m: &Mat) -> Tensor {
    Tensor::new([1, m.len(), m[0].len()], m.concat()).unwrap()
}

#[test]
fn pad_rows_are_zero_and_positions_differ_by_encoding() {
    let cfg = tiny_config();
    let store = params(&cfg, 1);
    let tokens = TokenBatch::from_inputs(vec![vec![BOS, 5, 5, 6], vec![BOS, 4]]).unwrap();
    let mut g = Graph::with_store(&store);
    let x = embed_tokens(&mut g, &tokens, 0.0).unwrap();
    let v = g.value(x);
    let second = sample_mat(v, 1);
    assert!(second[2..].iter().flatten().all(|&v| v == 0.0));
    let first = sample_mat(v, 0);
    let pe = to_mat(&sinusoidal(4, 8));
    let table = param(&store, "dec.embed");
    for t in 0..4 {
        let id = tokens.inputs()[0][t];
        for c in 0..8 {
            assert!((first[t][c] - table[id][c] - pe[t][c]).abs() < 1e-15);
        }
    }
    for c in 0..8 {
        let d = (first[1][c] - first[2][c]) - (pe[1][c] - pe[2][c]);
        assert!(d.abs() < 1e-15);
    }
}

#[test]
fn embedding_gradient_touches_used_rows_only() {
    let cfg = tiny_config();
    let store = params(&cfg, 2);
    let tokens = TokenBatch::from_inputs(vec![vec![BOS, 5, 7]]).unwrap();
    let mut g = Graph::with_store(&store);
    let x = embed_tokens(&mut g, &tokens, 0.0).unwrap();
    let mut r = rng(3);
    let w = g.constant(random_tensor(&mut r, &[1, 3, 8], 1.0)).unwrap();
    let y = g.mul(x, w).unwrap();
    let loss = g.sum_all(y).unwrap();
    let grads = g.backward(loss).unwrap();
    let ge = to_mat(grads.get("dec.embed").unwrap());
    for (id, row) in ge.iter().enumerate() {
        let used = [BOS, 5, 7].contains(&id);
        assert_eq!(row.iter().any(|&v| v != 0.0), used, "row {id}");
    }
}

fn think_oracle(store: &ParameterStore, prefix: &str, h: &Mat, c: &Mat, heads: usize) -> (Mat, Mat) {
    let q = ln(store, &format!("{prefix}.ln"), h);
    let (a, w) = mha(store, prefix, &q, c, heads, |_, _| true, |_, _, _| 0.0);
    let alpha: Mat = (0..h.len())
        .map(|i| (0..c.len()).map(|k| w.iter().map(|wh| wh[i][k]).sum::<f64>() / heads as f64).collect())
        .collect();
    (add(h, &a), alpha)
}

fn run_think(store: &ParameterStore, h: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::with_store(store);
    let (hv, cv) = (g.constant(h.clone()).unwrap(), g.constant(c.clone()).unwrap());
    let (out, alpha) = think_xattn(&mut g, "dec.0.think", hv, cv, 2, 0.0).unwrap();
    (g.value(out).clone(), g.value(alpha).clone())
}

#[test]
fn thought_attention_matches_loop_oracle() {
    let cfg = tiny_config();
    let store = params(&cfg, 4);
    let mut r = rng(5);
    let h = random_tensor(&mut r, &[2, 4, 8], 1.0);
    let c = random_tensor(&mut r, &[2, 3, 8], 1.0);
    let (out, alpha) = run_think(&store, &h, &c);
    assert_eq!(alpha.shape(), &[2, 4, 3]);
    for b in 0..2 {
        let (wo, wa) = think_oracle(&store, "dec.0.think", &sample_mat(&h, b), &sample_mat(&c, b), 2);
        assert!(max_diff(&sample_mat(&out, b), &wo) < 1e-12);
        assert!(max_diff(&sample_mat(&alpha, b), &wa) < 1e-12);
        for s in row_sums(&sample_mat(&alpha, b)) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_thought_takes_all_attention() {
    let cfg = tiny_config();
    let store = params(&cfg, 6);
    let mut r = rng(7);
    let h = random_tensor(&mut r, &[1, 3, 8], 1.0);
    let c = random_tensor(&mut r, &[1, 1, 8], 1.0);
    let (out, alpha) = run_think(&store, &h, &c);
    assert!(alpha.data().iter().all(|&v| v == 1.0));
    let value = linear(&store, "dec.0.think.wo", &linear(&store, "dec.0.think.wv", &sample_mat(&c, 0), false), false);
    let want: Mat = sample_mat(&h, 0).iter().map(|row| row.iter().zip(&value[0]).map(|(a, b)| a + b).collect()).collect();
    assert!(max_diff(&sample_mat(&out, 0), &want) < 1e-12);
}

#[test]
fn identical_thoughts_give_uniform_attention() {
    let cfg = tiny_config();
    let store = params(&cfg, 8);
    let mut r = rng(9);
    let h = random_tensor(&mut r, &[1, 3, 8], 1.0);
    let one = random_tensor(&mut r, &[1, 1, 8], 1.0);
    let c = Tensor::new([1, 4, 8], one.data().repeat(4)).unwrap();
    let (_, alpha) = run_think(&store, &h, &c);
    assert!(alpha.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

fn prior(alpha: &Mat, a: &Mat, w_seg: &Mat) -> (Mat, Mat) {
    let mut g = Graph::new();
    let al = g.constant(tensor3(alpha)).unwrap();
    let av = g.constant(tensor3(a)).unwrap();
    let wv = g.constant(tensor3(w_seg)).unwrap();
    let p = token_frame_prior(&mut g, al, av, wv).unwrap();
    (to_mat(g.value(p.beta)), to_mat(g.value(p.w)))
}

#[test]
fn frame_prior_composes_two_products() {
    let alpha = stochastic(10, 5, 3, 3);
    let a = stochastic(11, 3, 4, 4);
    let w_seg = stochastic(12, 4, 7, 6);
    let (beta, w) = prior(&alpha, &a, &w_seg);
    let mut want = vec![vec![0.0; 7]; 5];
    for t in 0..5 {
        for s in 0..7 {
            for k in 0..3 {
                for m in 0..4 {
                    want[t][s] += alpha[t][k] * a[k][m] * w_seg[m][s];
                }
            }
        }
    }
    assert!(max_diff(&w, &want) < 1e-15);
    assert!(max_diff(&beta, &matmul(&alpha, &a)) < 1e-15);
    for row in &w {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(row[6], 0.0);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn one_hot_and_uniform_plans() {
    let a = stochastic(13, 3, 4, 4);
    let w_seg = stochastic(14, 4, 6, 6);
    let r = matmul(&a, &w_seg);
    let onehot = vec![vec![0.0, 1.0, 0.0]];
    let (_, w) = prior(&onehot, &a, &w_seg);
    assert!(max_diff(&w, &vec![r[1].clone()]) < 1e-15);
    let (_, w) = prior(&vec![vec![1.0 / 3.0; 3]], &a, &w_seg);
    let mean: Vec<f64> = (0..6).map(|s| r.iter().map(|row| row[s]).sum::<f64>() / 3.0).collect();
    assert!(max_diff(&w, &vec![mean]) < 1e-15);
}

struct Ground {
    h: Tensor,
    e: Tensor,
    clip: ClipBatch,
}

fn ground_inputs(seed: u64, t: usize, valid: usize) -> Ground {
    let mut r = rng(seed);
    Ground {
        h: random_tensor(&mut r, &[1, 3, 8], 1.0),
        e: random_tensor(&mut r, &[1, t, 8], 1.0),
        clip: random_clip(&mut r, &[valid], t, 5),
    }
}

fn run_ground(store: &ParameterStore, cfg: &DecoderConfig, x: &Ground, w: &Mat) -> Tensor {
    let mut g = Graph::with_store(store);
    let frames = Frames::new(&mut g, &x.clip).unwrap();
    let (h, e) = (g.constant(x.h.clone()).unwrap(), g.constant(x.e.clone()).unwrap());
    let wv = g.constant(tensor3(w)).unwrap();
    let out = grounded_xattn(&mut g, "dec.0.ground", cfg, h, e, &frames, wv, EPS, 0.0).unwrap();
    g.value(out).clone()
}

fn ground_oracle(store: &ParameterStore, lambda: f64, x: &Ground, w: &Mat, valid: usize) -> (Mat, Vec<Mat>) {
    let h = sample_mat(&x.h, 0);
    let q = ln(store, "dec.0.ground.ln", &h);
    let (a, weights) = mha(
        store,
        "dec.0.ground",
        &q,
        &sample_mat(&x.e, 0),
        2,
        |_, j| j < valid,
        |_, i, j| lambda * (w[i][j] + EPS).ln(),
    );
    (add(&h, &a), weights)
}

#[test]
fn grounded_attention_matches_loop_oracle() {
    let cfg = tiny_config();
    let store = params(&cfg, 15);
    let x = ground_inputs(16, 6, 4);
    let w = stochastic(17, 3, 6, 4);
    for lambda in [1.0, 0.5] {
        let dc = DecoderConfig {
            lambda_w: lambda,
            ..cfg.decoder.clone()
        };
        let (want, _) = ground_oracle(&store, lambda, &x, &w, 4);
        assert!(max_diff(&sample_mat(&run_ground(&store, &dc, &x, &w), 0), &want) < 1e-12);
    }
}

#[test]
fn neutral_prior_settings_agree() {
    let cfg = tiny_config();
    let store = params(&cfg, 18);
    let x = ground_inputs(19, 5, 5);
    let w = stochastic(20, 3, 5, 5);
    let zero = DecoderConfig {
        lambda_w: 0.0,
        ..cfg.decoder.clone()
    };
    let off = DecoderConfig {
        use_prior: false,
        ..cfg.decoder.clone()
    };
    let unbiased = run_ground(&store, &off, &x, &w);
    assert_eq!(run_ground(&store, &zero, &x, &w), unbiased);
    let uniform = vec![vec![0.2; 5]; 3];
    let biased = run_ground(&store, &cfg.decoder, &x, &uniform);
    assert!(biased.max_abs_diff(&unbiased) < 1e-12);
    let (want, _) = ground_oracle(&store, 0.0, &x, &w, 5);
    assert!(max_diff(&sample_mat(&unbiased, 0), &want) < 1e-12);
}

#[test]
fn one_hot_prior_pins_a_frame() {
    let cfg = tiny_config();
    let store = params(&cfg, 21);
    let x = ground_inputs(22, 6, 6);
    let targets = [5usize, 1, 3];
    let w: Mat = targets.iter().map(|&t| (0..6).map(|s| (s == t) as u8 as f64).collect()).collect();
    let (want, weights) = ground_oracle(&store, 1.0, &x, &w, 6);
    assert!(max_diff(&sample_mat(&run_ground(&store, &cfg.decoder, &x, &w), 0), &want) < 1e-12);
    for wh in &weights {
        for (i, &t) in targets.iter().enumerate() {
            assert!(wh[i][t] >= 1.0 - 1e-4, "{}", wh[i][t]);
        }
    }
}

fn logits(store: &ParameterStore, cfg: &thoughtroute::ModelConfig, clip: &ClipBatch, tokens: &TokenBatch) -> Tensor {
    let mut g = Graph::with_store(store);
    let f = model::forward(&mut g, cfg, clip, tokens).unwrap();
    g.value(f.logits).clone()
}

#[test]
fn logits_ignore_future_tokens() {
    let cfg = tiny_config();
    let store = params(&cfg, 23);
    let mut r = rng(24);
    let clip = random_clip(&mut r, &[7], 7, cfg.encoder.d_x);
    let base_ids = vec![BOS, 4, 5, 6, 7, 4];
    let base = sample_mat(&logits(&store, &cfg, &clip, &TokenBatch::from_inputs(vec![base_ids.clone()]).unwrap()), 0);
    assert_eq!(base.len(), 6);
    assert_eq!(base[0].len(), 8);
    for t in 1..6 {
        let mut ids = base_ids.clone();
        for v in ids.iter_mut().skip(t) {
            *v = if *v == 7 { 3 } else { 7 };
        }
        let other = sample_mat(&logits(&store, &cfg, &clip, &TokenBatch::from_inputs(vec![ids]).unwrap()), 0);
        assert!(max_diff(&other[..t].to_vec(), &base[..t].to_vec()) <= 1e-10);
        assert!(max_diff(&other[t..].to_vec(), &base[t..].to_vec()) > 1e-8);
    }
}

#[test]
fn identical_samples_give_identical_logits() {
    let cfg = tiny_config();
    let store = params(&cfg, 25);
    let mut r = rng(26);
    let one = random_tensor(&mut r, &[1, 5, 5], 1.0);
    let clip = ClipBatch::new(Tensor::new([2, 5, 5], one.data().repeat(2)).unwrap(), vec![5, 5]).unwrap();
    let tokens = TokenBatch::from_targets(&[vec![4, 5, EOS], vec![4, 5, EOS]]).unwrap();
    let l = logits(&store, &cfg, &clip, &tokens);
    assert_eq!(l.shape(), &[2, 3, 8]);
    assert_eq!(sample_mat(&l, 0), sample_mat(&l, 1));
}

#[test]
fn frame_priors_are_distributions_over_valid_frames() {
    let cfg = tiny_config();
    let store = params(&cfg, 27);
    let mut r = rng(28);
    let clip = random_clip(&mut r, &[9, 5], 9, cfg.encoder.d_x);
    let tokens = TokenBatch::from_targets(&[vec![4, 6, 5, EOS], vec![7, EOS]]).unwrap();
    let mut g = Graph::with_store(&store);
    let f = model::forward(&mut g, &cfg, &clip, &tokens).unwrap();
    assert_eq!(f.priors.len(), cfg.decoder.layers);
    for p in &f.priors {
        let w = g.value(p.w);
        for (b, &valid) in [9usize, 5].iter().enumerate() {
            for row in sample_mat(w, b) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!(row[valid..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn disabling_the_prior_matches_zero_strength() {
    let cfg = tiny_config();
    let store = params(&cfg, 29);
    let mut r = rng(30);
    let clip = random_clip(&mut r, &[6, 4], 6, cfg.encoder.d_x);
    let tokens = TokenBatch::from_targets(&[vec![4, 6, EOS], vec![5, EOS]]).unwrap();
    let mut off = cfg.clone();
    off.decoder.use_prior = false;
    let mut zero = cfg.clone();
    zero.decoder.lambda_w = 0.0;
    let a = logits(&store, &off, &clip, &tokens);
    assert_eq!(a, logits(&store, &zero, &clip, &tokens));
    assert!(a.max_abs_diff(&logits(&store, &cfg, &clip, &tokens)) > 1e-8);
}

#[test]
fn decoder_layer_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let full = params(&cfg, 31);
    let mut store = ParameterStore::new();
    for (n, t) in full.iter().filter(|(n, _)| n.starts_with("dec.0.")) {
        store.insert(n.to_string(), t.clone()).unwrap();
    }
    let mut r = rng(32);
    let clip = ClipBatch::new(Tensor::zeros([1, 5, 5]), vec![4]).unwrap();
    let h = random_tensor(&mut r, &[1, 3, 8], 1.0);
    let c = random_tensor(&mut r, &[1, 3, 8], 1.0);
    let e = random_tensor(&mut r, &[1, 5, 8], 1.0);
    let a = tensor3(&stochastic(33, 3, 4, 4));
    let w_seg = tensor3(&stochastic(34, 4, 5, 4));
    let mix = random_tensor(&mut r, &[1, 3, 8], 1.0);
    let report = grad_check(&store, 1e-5, 1e-4, |g| {
        let frames = Frames::new(g, &clip).map_err(te)?;
        let hv = g.constant(h.clone())?;
        let cv = g.constant(c.clone())?;
        let ev = g.constant(e.clone())?;
        let av = g.constant(a.clone())?;
        let wv = g.constant(w_seg.clone())?;
        let (out, _) = decoder_layer(g, &cfg, 0, hv, cv, ev, &frames, av, wv).map_err(te)?;
        let m = g.constant(mix.clone())?;
        let y = g.mul(out, m)?;
        g.sum_all(y)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Next-token scores of a fixed toy model over `[PAD, BOS, EOS, 3, 4]`.
fn toy(prefix: &[usize]) -> thoughtroute::Result<Vec<f64>> {
    let probs: [f64; 3] = match prefix {
        [BOS] => [0.1, 0.5, 0.4],
        [BOS, 3] => [0.35, 0.35, 0.3],
        [BOS, 4] => [0.9, 0.05, 0.05],
        [BOS, 3, 3] => [0.6, 0.3, 0.1],
        [BOS, 3, 4] => [0.2, 0.2, 0.6],
        [BOS, 4, 3] => [0.5, 0.25, 0.25],
        [BOS, 4, 4] => [0.9, 0.05, 0.05],
        _ => [0.4, 0.3, 0.3],
    };
    Ok(vec![f64::NEG_INFINITY, f64::NEG_INFINITY, probs[0].ln(), probs[1].ln(), probs[2].ln()])
}

/// Best sequence by exhaustive enumeration of everything of at most
/// `max_len` steps, unfinished sequences included.
fn exhaustive(a: f64, max_len: usize) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut frontier = vec![(vec![BOS], 0.0)];
    let mut consider = |score: f64, seq: Vec<usize>| {
        let better = match &best {
            None => true,
            Some((s, b)) => score > *s || (score == *s && seq < *b),
        };
        if better {
            best = Some((score, seq));
        }
    };
    for step in 0..max_len {
        let mut next = Vec::new();
        for (seq, lp) in frontier {
            let scores = toy(&seq).unwrap();
            for id in [EOS, 3, 4] {
                let mut s = seq.clone();
                s.push(id);
                let l = lp + scores[id];
                if id == EOS {
                    consider(l / length_penalty(s.len() - 1, a), s);
                } else if step + 1 == max_len {
                    consider(l / length_penalty(s.len() - 1, a), s);
                } else {
                    next.push((s, l));
                }
            }
        }
        frontier = next;
    }
    let mut seq = best.unwrap().1;
    seq.remove(0);
    if seq.last() == Some(&EOS) {
        seq.pop();
    }
    seq
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for a in [-1.0, 0.0, 1.0, 2.0, 5.0] {
        let want = exhaustive(a, 3);
        assert_eq!(beam(toy, 16, a, 3).unwrap(), want, "a = {a}");
    }
    assert_eq!(exhaustive(0.0, 3), vec![4]);
}

#[test]
fn narrow_beam_beats_greedy_on_the_toy() {
    // Greedy takes 3 (p=0.5) and ends with log(0.5*0.35); beam 2 finds [4] at 0.4*0.9.
    assert_eq!(greedy(toy, 3).unwrap(), vec![3]);
    assert_eq!(beam(toy, 2, 0.0, 3).unwrap(), vec![4]);
    assert_eq!(beam(toy, 1, 0.0, 3).unwrap(), greedy(toy, 3).unwrap());
}

#[test]
fn always_eos_decodes_to_nothing() {
    let eos = |_: &[usize]| Ok(log_softmax(&[0.0, 0.0, 9.0, 1.0, 1.0]));
    assert!(greedy(eos, 10).unwrap().is_empty());
    assert!(beam(eos, 4, 1.0, 10).unwrap().is_empty());
    assert!(beam(eos, 65, 1.0, 10).is_err());
}

#[test]
fn penalty_is_neutral_at_zero_and_grows_with_length() {
    for len in 1..20 {
        assert_eq!(length_penalty(len, 0.0), 1.0);
    }
    assert!((length_penalty(1, 1.0) - 1.0).abs() < 1e-15);
    assert!((length_penalty(13, 2.0) - 9.0).abs() < 1e-12);
}

#[test]
fn model_beam_of_one_is_greedy() {
    let cfg = tiny_config();
    let store = params(&cfg, 35);
    let mut r = rng(36);
    for _ in 0..4 {
        let clip = random_clip(&mut r, &[6], 6, cfg.encoder.d_x);
        let g = translate(&store, &cfg, &clip, &SearchConfig { beam: 1, len_penalty: 0.0, max_len: 6 }).unwrap();
        let mut next = |prefix: &[usize]| {
            let mut gr = Graph::with_store(&store);
            let enc = model::encode(&mut gr, &cfg, &clip)?;
            let tokens = TokenBatch::from_inputs(vec![prefix.to_vec()])?;
            let (l, _) = model::decode(&mut gr, &cfg, &enc, &tokens)?;
            Ok(log_softmax(&thoughtroute::decoder::last_logits(&gr, l, 0)))
        };
        let b = beam(&mut next, 1, 0.0, 6).unwrap();
        assert_eq!(g, b);
        assert!(g.iter().all(|&t| t != PAD && t != BOS && t != EOS));
        assert_eq!(g, translate(&store, &cfg, &clip, &SearchConfig { beam: 1, len_penalty: 0.0, max_len: 6 }).unwrap());
    }
}
