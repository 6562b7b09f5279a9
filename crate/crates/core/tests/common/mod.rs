//! Shared fixtures and plain-loop reference implementations.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thoughtroute::autodiff::{ParameterStore, Tensor};
use thoughtroute::config::ModelConfig;
use thoughtroute::ClipBatch;

pub type Mat = Vec<Vec<f64>>;

/// d=8, two heads everywhere, K=3, L=2, M=4, vocab 8, no dropout.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.d_model = 8;
    c.encoder.d_x = 5;
    c.encoder.heads = 2;
    c.encoder.dropout = 0.0;
    c.segmentation.segments = 4;
    c.think.thoughts = 3;
    c.think.heads = 2;
    c.decoder.heads = 2;
    c.decoder.vocab_size = 8;
    c
}

/// Model parameters with every entry (gains and biases included) nudged so
/// that no term vanishes by construction.
pub fn params(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    let mut store = thoughtroute::model::init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    store
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Random features `[B, T, d_x]` with the given valid lengths (padding holds
/// random values too).
pub fn random_clip(rng: &mut ChaCha8Rng, lengths: &[usize], t: usize, d_x: usize) -> ClipBatch {
    let x = random_tensor(rng, &[lengths.len(), t, d_x], 1.0);
    ClipBatch::new(x, lengths.to_vec()).unwrap()
}

/// Same clip with every padded feature replaced by fresh noise.
pub fn repad(rng: &mut ChaCha8Rng, clip: &ClipBatch, scale: f64) -> ClipBatch {
    let (t, dx) = (clip.max_len(), clip.feature_dim());
    let mut x = clip.features().clone();
    for (b, &l) in clip.lengths().iter().enumerate() {
        for f in l..t {
            for c in 0..dx {
                x.data_mut()[(b * t + f) * dx + c] = rng.gen_range(-scale..scale);
            }
        }
    }
    ClipBatch::new(x, clip.lengths().to_vec()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

/// Rows of sample `b` of a `[B, R, C]` tensor.
pub fn sample_mat(t: &Tensor, b: usize) -> Mat {
    let (r, c) = (t.shape()[1], t.shape()[2]);
    (0..r).map(|i| t.data()[(b * r + i) * c..(b * r + i + 1) * c].to_vec()).collect()
}

pub fn param(store: &ParameterStore, name: &str) -> Mat {
    to_mat(store.get(name).unwrap())
}

pub fn param_vec(store: &ParameterStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (k, &x) in row.iter().enumerate() {
                        s += x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn ln(store: &ParameterStore, prefix: &str, x: &Mat) -> Mat {
    layer_norm(x, &param_vec(store, &format!("{prefix}.g")), &param_vec(store, &format!("{prefix}.b")))
}

pub fn linear(store: &ParameterStore, prefix: &str, x: &Mat, bias: bool) -> Mat {
    let y = matmul(x, &param(store, &format!("{prefix}.w")));
    if bias {
        add_row(&y, &param_vec(store, &format!("{prefix}.b")))
    } else {
        y
    }
}

pub fn softmax_masked(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let mx = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(v, &k)| if k { (v - mx).exp() } else { 0.0 })
        .collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|v| v / s).collect()
}

/// Output and per-head weights `[H][T_q][T_k]` of multi-head attention.
pub fn mha(
    store: &ParameterStore,
    prefix: &str,
    query: &Mat,
    source: &Mat,
    heads: usize,
    keep: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> (Mat, Vec<Mat>) {
    let q = linear(store, &format!("{prefix}.wq"), query, false);
    let k = linear(store, &format!("{prefix}.wk"), source, false);
    let v = linear(store, &format!("{prefix}.wv"), source, false);
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![vec![0.0; d]; query.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let mut wh = Vec::new();
        for i in 0..query.len() {
            let logits: Vec<f64> = (0..source.len())
                .map(|j| {
                    let dot: f64 = (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum();
                    dot * scale + bias(h, i, j)
                })
                .collect();
            let keep: Vec<bool> = (0..source.len()).map(|j| keep(i, j)).collect();
            let w = softmax_masked(&logits, &keep);
            for c in 0..dh {
                ctx[i][h * dh + c] = (0..source.len()).map(|j| w[j] * v[j][h * dh + c]).sum();
            }
            wh.push(w);
        }
        weights.push(wh);
    }
    (linear(store, &format!("{prefix}.wo"), &ctx, false), weights)
}

/// `x + l2(relu(l1(LN x)))`.
pub fn ffn_sublayer(store: &ParameterStore, prefix: &str, x: &Mat) -> Mat {
    let h = ln(store, &format!("{prefix}.ln"), x);
    let h = relu(&linear(store, &format!("{prefix}.l1"), &h, true));
    add(x, &linear(store, &format!("{prefix}.l2"), &h, true))
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn row_sums(m: &Mat) -> Vec<f64> {
    m.iter().map(|r| r.iter().sum()).collect()
}

pub fn col_sums(m: &Mat) -> Vec<f64> {
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).sum()).collect()
}

/// Lifts a model error into the engine's error type for closures handed to
/// the gradient checker.
pub fn te(e: thoughtroute::Error) -> thoughtroute::autodiff::TensorError {
    match e {
        thoughtroute::Error::Tensor(t) => t,
        other => thoughtroute::autodiff::TensorError::InvalidArgument(other.to_string()),
    }
}
