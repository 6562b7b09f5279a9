use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::mask::Mask;
use crate::store::{GradientMap, ParameterStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Constant,
    Variable,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    SumAxis(usize, usize),
    SumAll(usize),
    Cumsum(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    DepthwiseConv {
        x: usize,
        weight: usize,
        bias: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::SumAxis(..) => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::Cumsum(..) => "cumsum",
            Op::Softmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "embedding",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Variable => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Abs(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::SumAxis(x, _)
            | Op::SumAll(x)
            | Op::Cumsum(x)
            | Op::Softmax(x)
            | Op::Narrow { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::DepthwiseConv { x, weight, bias } => vec![*x, *weight, *bias],
        }
    }
}

pub(crate) struct Node<'s> {
    pub value: Cow<'s, Tensor>,
    pub op: Op,
    pub needs_grad: bool,
}

/// A recording of one forward computation.
///
/// Parameters are pulled from an optional [`ParameterStore`] by name on
/// first use; every other leaf is either a constant or a free variable.
/// A graph is single-threaded and append-only; build a fresh one per
/// forward pass.
pub struct Graph<'s> {
    store: Option<&'s ParameterStore>,
    pub(crate) nodes: Vec<Node<'s>>,
    bound: HashMap<String, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    /// Graph without a parameter store, in evaluation mode.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_store(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> Option<&'s ParameterStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        self.push_cow(Cow::Owned(value), op)
    }

    fn push_cow(&mut self, value: Cow<'s, Tensor>, op: Op) -> Result<Var> {
        let node = self.nodes.len();
        if matches!(value, Cow::Owned(_)) && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node,
            });
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Variable => true,
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(node))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Leaf that receives a gradient but is not a named parameter.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Variable)
    }

    /// Binds parameter `name` from the store (once per graph).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let v = self.push_cow(Cow::Borrowed(store.get(name)?), Op::Variable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = match &self.nodes[x.0].value {
            Cow::Borrowed(t) => Cow::Borrowed(*t),
            Cow::Owned(t) => Cow::Owned(t.clone()),
        };
        self.push_cow(value, Op::Constant)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {p} must be < 1"
            )));
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let rng = &mut self.rng;
        let cut = (p * 4294967296.0) as u64;
        let mask = Tensor::from_fn(shape, |_| if (rng.gen::<u32>() as u64) < cut { 0.0 } else { keep });
        let m = self.constant(mask)?;
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every
    /// parameter in the store (zeros for parameters not on the graph).
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let store = self.store.ok_or_else(|| {
            TensorError::InvalidArgument("graph has no parameter store".to_string())
        })?;
        let mut out = store.zeros_like();
        self.backward_into(loss, &mut out)?;
        Ok(out)
    }

    /// Like [`Graph::backward`] but adds the gradients into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut GradientMap) -> Result<()> {
        let mut seeds = Vec::with_capacity(self.bound.len());
        for (name, var) in &self.bound {
            let dst = out
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            if dst.shape() != self.shape(*var) {
                return Err(TensorError::ShapeMismatch {
                    op: "backward",
                    lhs: dst.shape().to_vec(),
                    rhs: self.shape(*var).to_vec(),
                });
            }
            seeds.push((var.0, dst.take_data()));
        }
        let result = self.gradients_seeded(loss, seeds);
        let mut grads = match result {
            Ok(g) => g.grads,
            Err((e, mut grads)) => {
                for (name, var) in &self.bound {
                    if let (Some(dst), Some(g)) = (out.get_mut(name), grads[var.0].take()) {
                        dst.put_data(g);
                    }
                }
                return Err(e);
            }
        };
        for (name, var) in &self.bound {
            if let (Some(dst), Some(g)) = (out.get_mut(name), grads[var.0].take()) {
                dst.put_data(g);
            }
        }
        Ok(())
    }

    /// Reverse pass returning gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        self.gradients_seeded(loss, Vec::new()).map_err(|(e, _)| e)
    }

    /// Reverse pass whose accumulators for the given nodes start from
    /// existing buffers. On error the buffers are handed back.
    #[allow(clippy::type_complexity)]
    fn gradients_seeded(
        &self,
        loss: Var,
        seeds: Vec<(usize, Vec<f64>)>,
    ) -> std::result::Result<Gradients, (TensorError, Vec<Option<Vec<f64>>>)> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (i, buf) in seeds {
            grads[i] = Some(buf);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err((TensorError::NonScalarLoss(lv.shape().to_vec()), grads));
        }
        if self.nodes[loss.0].needs_grad {
            let g = accumulate(&mut grads, loss.0, 1);
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Variable | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients from [`Graph::gradients`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

pub(crate) fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

impl Mask {
    /// Keep-flags expanded to `shape` (which `self` must broadcast into).
    pub(crate) fn expand_to(&self, shape: &[usize]) -> Result<Vec<bool>> {
        let out = crate::tensor::broadcast_shapes("mask", shape, self.shape())?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                lhs: shape.to_vec(),
                rhs: self.shape().to_vec(),
            });
        }
        let sm = crate::tensor::broadcast_strides(self.shape(), shape);
        let zeros = vec![0; shape.len()];
        let mut keep = vec![false; shape.iter().product()];
        let flags = self.flags();
        crate::tensor::zip_broadcast(shape, &sm, &zeros, |o, m, _| keep[o] = flags[m]);
        Ok(keep)
    }
}
