//! Forward definitions and vector-Jacobian products for every op.

use crate::error::{Result, TensorError};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::kernels::{gemm, sigmoid, softplus, MatView};
use crate::mask::Mask;
use crate::tensor::{broadcast_shapes, broadcast_strides, strides, zip_broadcast, Tensor};

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Abs,
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]))
}

/// Broadcast batch layout of a matmul: output batch shape plus per-batch
/// matrix offsets into each operand.
struct BatchPlan {
    out_batch: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_plan(a: &[usize], b: &[usize], m: usize, k: usize, n: usize) -> Result<BatchPlan> {
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let out_batch = broadcast_shapes("matmul", ba, bb)?;
    let sa = broadcast_strides(ba, &out_batch);
    let sb = broadcast_strides(bb, &out_batch);
    let mut a_offsets = Vec::new();
    let mut b_offsets = Vec::new();
    zip_broadcast(&out_batch, &sa, &sb, |_, ia, ib| {
        a_offsets.push(ia * m * k);
        b_offsets.push(ib * k * n);
    });
    Ok(BatchPlan {
        out_batch,
        a_offsets,
        b_offsets,
    })
}

impl<'s> Graph<'s> {
    fn binary(&mut self, a: Var, b: Var, kind: Bin) -> Result<Var> {
        let data = match kind {
            Bin::Add => self.binary_with(a, b, kind, |x, y| x + y)?,
            Bin::Sub => self.binary_with(a, b, kind, |x, y| x - y)?,
            Bin::Mul => self.binary_with(a, b, kind, |x, y| x * y)?,
            Bin::Div => self.binary_with(a, b, kind, |x, y| x / y)?,
        };
        let op = match kind {
            Bin::Add => Op::Add(a.0, b.0),
            Bin::Sub => Op::Sub(a.0, b.0),
            Bin::Mul => Op::Mul(a.0, b.0),
            Bin::Div => Op::Div(a.0, b.0),
        };
        self.push(data, op)
    }

    #[inline(always)]
    fn binary_with(&self, a: Var, b: Var, kind: Bin, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(va.shape().to_vec(), data);
        }
        let shape = broadcast_shapes(kind.name(), va.shape(), vb.shape())?;
        let (da, db) = (va.data(), vb.data());
        let n = shape.iter().product();
        let inner = *shape.last().unwrap_or(&1);
        // Common case: one operand is a row broadcast over the other.
        if vb.numel() == inner && vb.shape().last() == Some(&inner) && va.numel() == n {
            let mut out = Vec::with_capacity(n);
            for row in da.chunks_exact(inner) {
                out.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            return Tensor::new(shape, out);
        }
        let sa = broadcast_strides(va.shape(), &shape);
        let sb = broadcast_strides(vb.shape(), &shape);
        let mut out = vec![0.0; n];
        zip_broadcast(&shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
        Tensor::new(shape, out)
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Div)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v + c).collect())?;
        self.push(data, Op::AddScalar(x.0))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * c).collect())?;
        self.push(data, Op::MulScalar(x.0, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let vx = self.value(x);
        let map = |f: fn(f64) -> f64| -> Vec<f64> { vx.data().iter().map(|&v| f(v)).collect() };
        let values = match kind {
            Unary::Relu => vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Unary::Sigmoid => map(sigmoid),
            Unary::Softplus => map(softplus),
            Unary::Exp => vx.data().iter().map(|v| v.exp()).collect(),
            Unary::Log => vx.data().iter().map(|v| v.ln()).collect(),
            Unary::Abs => vx.data().iter().map(|v| v.abs()).collect(),
        };
        let data = Tensor::new(vx.shape().to_vec(), values)?;
        let op = match kind {
            Unary::Relu => Op::Relu(x.0),
            Unary::Sigmoid => Op::Sigmoid(x.0),
            Unary::Softplus => Op::Softplus(x.0),
            Unary::Exp => Op::Exp(x.0),
            Unary::Log => Op::Log(x.0),
            Unary::Abs => Op::Abs(x.0),
        };
        self.push(data, op)
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    /// Natural log with no epsilon guard: `log(0)` is a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    /// `|x|`; the derivative at exactly 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]`. Batch axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims("matmul", va.shape(), vb.shape())?;
        let out = if vb.rank() == 2 {
            let rows = va.numel() / k;
            let mut shape = va.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut c = vec![0.0; rows * n];
            gemm(
                rows,
                k,
                n,
                va.data(),
                MatView::row_major(0, k),
                vb.data(),
                MatView::row_major(0, n),
                0.0,
                &mut c,
                MatView::row_major(0, n),
            );
            Tensor::new(shape, c)?
        } else {
            let plan = batch_plan(va.shape(), vb.shape(), m, k, n)?;
            let mut shape = plan.out_batch.clone();
            shape.extend([m, n]);
            let mut c = vec![0.0; shape.iter().product()];
            for (bi, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    va.data(),
                    MatView::row_major(oa, k),
                    vb.data(),
                    MatView::row_major(ob, n),
                    0.0,
                    &mut c,
                    MatView::row_major(bi * m * n, n),
                );
            }
            Tensor::new(shape, c)?
        };
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument(format!(
                "bad permutation {perm:?} for rank {rank}"
            )));
        }
        let st = strides(vx.shape());
        let shape: Vec<usize> = perm.iter().map(|&p| vx.shape()[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let zeros = vec![0; rank];
        let d = vx.data();
        let mut out = vec![0.0; vx.numel()];
        zip_broadcast(&shape, &src, &zeros, |o, i, _| out[o] = d[i]);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Permute(x.0, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(TensorError::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x.0))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || len == 0 || start + len > vx.shape()[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow({axis}, {start}, {len}) on shape {:?}",
                vx.shape()
            )));
        }
        let st = strides(vx.shape());
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let base = start * st[axis];
        let zeros = vec![0; shape.len()];
        let d = vx.data();
        let mut out = vec![0.0; shape.iter().product()];
        zip_broadcast(&shape, &st, &zeros, |o, i, _| out[o] = d[base + i]);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Narrow { x: x.0, axis, start })
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(TensorError::InvalidArgument(format!("sum axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::SumAxis(x.0, axis))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Inclusive prefix sum along the last axis (sequential, so partial
    /// sums of nonnegative inputs are nondecreasing exactly).
    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = *vx.shape().last().ok_or_else(|| TensorError::InvalidArgument("cumsum of scalar".into()))?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            for j in 1..n {
                row[j] += row[j - 1];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(t, Op::Cumsum(x.0))
    }

    /// Softmax over the last axis with an optional hard keep-mask.
    ///
    /// Masked positions get probability exactly 0. Rows are shifted by
    /// their max over kept entries before exponentiation.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let vx = self.value(x);
        let n = *vx.shape().last().ok_or_else(|| TensorError::InvalidArgument("softmax of scalar".into()))?;
        let keep = match mask {
            Some(m) => Some(m.expand_to(vx.shape())?),
            None => None,
        };
        let d = vx.data();
        let mut out = vec![0.0; d.len()];
        for (r, row) in out.chunks_mut(n).enumerate() {
            let src = &d[r * n..(r + 1) * n];
            let kept = |j: usize| keep.as_ref().is_none_or(|k| k[r * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in src.iter().enumerate() {
                if kept(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow);
            }
            let mut sum = 0.0;
            for (j, (o, &v)) in row.iter_mut().zip(src).enumerate() {
                if kept(j) {
                    *o = (v - mx).exp();
                    sum += *o;
                }
            }
            let inv = 1.0 / sum;
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x.0))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| TensorError::InvalidArgument("layer_norm of scalar".into()))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let src = &vx.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Row lookup: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(TensorError::InvalidArgument("embedding table must be 2-D".into()));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, len: rows });
            }
            out.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new([ids.len(), d], out)?;
        self.push(
            t,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Depthwise 1-D convolution over time: `x [B,T,C]`, `weight [C,k]`
    /// (odd `k`, centred), `bias [C]`, zero padding outside `0..T`.
    pub fn depthwise_conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        if vx.rank() != 3 || vw.rank() != 2 || vw.shape()[0] != vx.shape()[2] || vb.shape() != [vx.shape()[2]] {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let (bsz, t_len, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let ks = vw.shape()[1];
        if ks % 2 == 0 {
            return Err(TensorError::InvalidArgument("conv kernel must be odd".into()));
        }
        let half = ks / 2;
        let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![0.0; vx.numel()];
        for b in 0..bsz {
            for t in 0..t_len {
                let o = &mut out[(b * t_len + t) * c..(b * t_len + t + 1) * c];
                o.copy_from_slice(bd);
                for i in 0..ks {
                    let src = t + i;
                    if src < half || src - half >= t_len {
                        continue;
                    }
                    let xs = &xd[(b * t_len + src - half) * c..(b * t_len + src - half + 1) * c];
                    for ch in 0..c {
                        o[ch] += wd[ch * ks + i] * xs[ch];
                    }
                }
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::DepthwiseConv {
                x: x.0,
                weight: weight.0,
                bias: bias.0,
            },
        )
    }

    /// Accumulates the vector-Jacobian product of node `i` into its inputs.
    pub(crate) fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out_shape = nodes[i].value.shape();
        let needs = |j: usize| nodes[j].needs_grad;
        match &nodes[i].op {
            Op::Constant | Op::Variable => {}
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) | &Op::Div(a, b) => {
                let kind = match nodes[i].op {
                    Op::Add(..) => Bin::Add,
                    Op::Sub(..) => Bin::Sub,
                    Op::Mul(..) => Bin::Mul,
                    _ => Bin::Div,
                };
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                let (da, db) = (va.data(), vb.data());
                if needs(a) {
                    if va.shape() == out_shape {
                        match kind {
                            Bin::Add | Bin::Sub => add_grad(grads, a, g, |gi, _| gi),
                            Bin::Mul if vb.shape() == out_shape => add_grad(grads, a, g, |gi, j| gi * db[j]),
                            Bin::Div if vb.shape() == out_shape => add_grad(grads, a, g, |gi, j| gi / db[j]),
                            _ => broadcast_grad(grads, a, va.numel(), out_shape, va.shape(), vb.shape(), |o, _, y| match kind {
                                Bin::Mul => g[o] * db[y],
                                _ => g[o] / db[y],
                            }),
                        }
                    } else {
                        broadcast_grad(grads, a, va.numel(), out_shape, va.shape(), vb.shape(), |o, _, y| match kind {
                            Bin::Add | Bin::Sub => g[o],
                            Bin::Mul => g[o] * db[y],
                            Bin::Div => g[o] / db[y],
                        });
                    }
                }
                if needs(b) {
                    if vb.shape() == out_shape && va.shape() == out_shape {
                        match kind {
                            Bin::Add => add_grad(grads, b, g, |gi, _| gi),
                            Bin::Sub => add_grad(grads, b, g, |gi, _| -gi),
                            Bin::Mul => add_grad(grads, b, g, |gi, j| gi * da[j]),
                            Bin::Div => add_grad(grads, b, g, |gi, j| -gi * da[j] / (db[j] * db[j])),
                        }
                    } else {
                        // Operand order is swapped so the accumulation target comes first.
                        broadcast_grad(grads, b, vb.numel(), out_shape, vb.shape(), va.shape(), |o, y, x| match kind {
                            Bin::Add => g[o],
                            Bin::Sub => -g[o],
                            Bin::Mul => g[o] * da[x],
                            Bin::Div => -g[o] * da[x] / (db[y] * db[y]),
                        });
                    }
                }
            }
            &Op::AddScalar(x) => add_grad(grads, x, g, |gi, _| gi),
            &Op::MulScalar(x, c) => add_grad(grads, x, g, |gi, _| gi * c),
            &Op::Relu(x) => {
                let xv = nodes[x].value.data();
                add_grad(grads, x, g, |gi, j| if xv[j] > 0.0 { gi } else { 0.0 })
            }
            &Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                add_grad(grads, x, g, |gi, j| gi * y[j] * (1.0 - y[j]))
            }
            &Op::Softplus(x) => {
                let xv = nodes[x].value.data();
                add_grad(grads, x, g, |gi, j| gi * sigmoid(xv[j]))
            }
            &Op::Exp(x) => {
                let y = nodes[i].value.data();
                add_grad(grads, x, g, |gi, j| gi * y[j])
            }
            &Op::Log(x) => {
                let xv = nodes[x].value.data();
                add_grad(grads, x, g, |gi, j| gi / xv[j])
            }
            &Op::Abs(x) => {
                let xv = nodes[x].value.data();
                add_grad(grads, x, g, |gi, j| {
                    if xv[j] > 0.0 {
                        gi
                    } else if xv[j] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })
            }
            &Op::MatMul(a, b) => self.matmul_backward(a, b, g, grads),
            Op::Permute(x, perm) => {
                let vx = &nodes[*x].value;
                let st = strides(vx.shape());
                let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let zeros = vec![0; src.len()];
                let gx = accumulate(grads, *x, g.len());
                zip_broadcast(out_shape, &src, &zeros, |o, j, _| gx[j] += g[o]);
            }
            &Op::Reshape(x) => add_grad(grads, x, g, |gi, _| gi),
            &Op::Narrow { x, axis, start } => {
                let vx = &nodes[x].value;
                let st = strides(vx.shape());
                let base = start * st[axis];
                let zeros = vec![0; st.len()];
                let gx = accumulate(grads, x, vx.numel());
                zip_broadcast(out_shape, &st, &zeros, |o, j, _| gx[base + j] += g[o]);
            }
            Op::Concat { xs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut pos = 0;
                for o in 0..outer {
                    for &x in xs {
                        let block = nodes[x].value.shape()[*axis] * inner;
                        if needs(x) {
                            let gx = accumulate(grads, x, nodes[x].value.numel());
                            for (d, s) in gx[o * block..(o + 1) * block].iter_mut().zip(&g[pos..pos + block]) {
                                *d += s;
                            }
                        }
                        pos += block;
                    }
                }
            }
            &Op::SumAxis(x, axis) => {
                let vx = &nodes[x].value;
                let (outer, n, inner) = split_axis(vx.shape(), axis);
                let gx = accumulate(grads, x, vx.numel());
                for o in 0..outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        for (d, s) in gx[(o * n + j) * inner..(o * n + j + 1) * inner].iter_mut().zip(gs) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                let gx = accumulate(grads, x, nodes[x].value.numel());
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            &Op::Cumsum(x) => {
                let n = *out_shape.last().unwrap();
                let gx = accumulate(grads, x, g.len());
                for (dst, src) in gx.chunks_mut(n).zip(g.chunks(n)) {
                    let mut run = 0.0;
                    for j in (0..n).rev() {
                        run += src[j];
                        dst[j] += run;
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = *out_shape.last().unwrap();
                let y = nodes[i].value.data();
                let gx = accumulate(grads, x, g.len());
                for ((dst, gy), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] += yr[j] * (gy[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap();
                let gv = nodes[*gain].value.data();
                if needs(*gain) {
                    let gg = accumulate(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = accumulate(grads, *bias, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if needs(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    let dn = d as f64;
                    let mut dxhat = vec![0.0; d];
                    for (r, ((dst, gr), hr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let k = inv_std[r] / dn;
                        for j in 0..d {
                            dst[j] += k * (dn * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = out_shape[1];
                let gt = accumulate(grads, *table, nodes[*table].value.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            &Op::DepthwiseConv { x, weight, bias } => {
                let (vx, vw) = (&nodes[x].value, &nodes[weight].value);
                let (bsz, t_len, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let ks = vw.shape()[1];
                let half = ks / 2;
                let (xd, wd) = (vx.data(), vw.data());
                if needs(bias) {
                    let gb = accumulate(grads, bias, c);
                    for row in g.chunks(c) {
                        for ch in 0..c {
                            gb[ch] += row[ch];
                        }
                    }
                }
                let mut gw = needs(weight).then(|| vec![0.0; c * ks]);
                let mut gx = needs(x).then(|| vec![0.0; vx.numel()]);
                for b in 0..bsz {
                    for t in 0..t_len {
                        let go = &g[(b * t_len + t) * c..(b * t_len + t + 1) * c];
                        for k in 0..ks {
                            let src = t + k;
                            if src < half || src - half >= t_len {
                                continue;
                            }
                            let base = (b * t_len + src - half) * c;
                            for ch in 0..c {
                                if let Some(gw) = gw.as_mut() {
                                    gw[ch * ks + k] += go[ch] * xd[base + ch];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[base + ch] += go[ch] * wd[ch * ks + k];
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = gw {
                    add_into(accumulate(grads, weight, gw.len()), &gw, |v, _| v);
                }
                if let Some(gx) = gx {
                    add_into(accumulate(grads, x, gx.len()), &gx, |v, _| v);
                }
            }
        }
    }

    fn matmul_backward(&self, a: usize, b: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k, n) = matmul_dims("matmul", va.shape(), vb.shape()).expect("validated in forward");
        let (need_a, need_b) = (self.nodes[a].needs_grad, self.nodes[b].needs_grad);
        if vb.rank() == 2 {
            let rows = va.numel() / k;
            if need_a {
                let ga = accumulate(grads, a, va.numel());
                // dA = dC · Bᵀ
                gemm(
                    rows,
                    n,
                    k,
                    g,
                    MatView::row_major(0, n),
                    vb.data(),
                    MatView::transposed(0, n),
                    1.0,
                    ga,
                    MatView::row_major(0, k),
                );
            }
            if need_b {
                let gb = accumulate(grads, b, vb.numel());
                // dB = Aᵀ · dC
                gemm(
                    k,
                    rows,
                    n,
                    va.data(),
                    MatView::transposed(0, k),
                    g,
                    MatView::row_major(0, n),
                    1.0,
                    gb,
                    MatView::row_major(0, n),
                );
            }
            return;
        }
        let plan = batch_plan(va.shape(), vb.shape(), m, k, n).expect("validated in forward");
        if need_a {
            let ga = accumulate(grads, a, va.numel());
            for (bi, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                gemm(
                    m,
                    n,
                    k,
                    g,
                    MatView::row_major(bi * m * n, n),
                    vb.data(),
                    MatView::transposed(ob, n),
                    1.0,
                    ga,
                    MatView::row_major(oa, k),
                );
            }
        }
        if need_b {
            let gb = accumulate(grads, b, vb.numel());
            for (bi, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                gemm(
                    k,
                    m,
                    n,
                    va.data(),
                    MatView::transposed(oa, k),
                    g,
                    MatView::row_major(bi * m * n, n),
                    1.0,
                    gb,
                    MatView::row_major(ob, n),
                );
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

#[inline]
fn add_into(dst: &mut [f64], g: &[f64], f: impl Fn(f64, usize) -> f64) {
    for (j, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(gi, j);
    }
}

/// Accumulates `f(out, t, other)` into the gradient of `target`, where
/// `t` and `other` are the offsets of the two operands read through their
/// broadcast strides.
#[allow(clippy::too_many_arguments)]
fn broadcast_grad(
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    len: usize,
    out_shape: &[usize],
    target_shape: &[usize],
    other_shape: &[usize],
    f: impl Fn(usize, usize, usize) -> f64,
) {
    let st = broadcast_strides(target_shape, out_shape);
    let so = broadcast_strides(other_shape, out_shape);
    let gt = accumulate(grads, target, len);
    zip_broadcast(out_shape, &st, &so, |o, t, x| gt[t] += f(o, t, x));
}

/// Adds `f(g_j, j)` into the gradient of node `idx` (same length as `g`),
/// writing directly when the node has no gradient yet.
#[inline]
fn add_grad(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], f: impl Fn(f64, usize) -> f64) {
    match &mut grads[idx] {
        Some(dst) => add_into(dst, g, f),
        slot @ None => *slot = Some(g.iter().enumerate().map(|(j, &gi)| f(gi, j)).collect()),
    }
}
