use crate::error::{Result, TensorError};
use crate::tensor::{broadcast_shapes, broadcast_strides, zip_broadcast};

/// Boolean keep-mask used by [`Graph::masked_softmax`](crate::Graph::masked_softmax).
///
/// Broadcasts against the logits like any tensor operand. `true` keeps a
/// position, `false` pins its probability to exactly zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, keep: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != keep.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: keep.len(),
            });
        }
        Ok(Self { shape, keep })
    }

    /// From an additive mask with entries in `{0, -inf}`.
    pub fn from_additive(shape: impl Into<Vec<usize>>, additive: &[f64]) -> Result<Self> {
        let keep = additive
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(true)
                } else if v == f64::NEG_INFINITY {
                    Ok(false)
                } else {
                    Err(TensorError::InvalidArgument(format!(
                        "additive mask entries must be 0 or -inf, got {v}"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, keep)
    }

    /// From a `{0,1}` validity mask (nonzero keeps).
    pub fn from_validity(shape: impl Into<Vec<usize>>, validity: &[f64]) -> Result<Self> {
        Self::new(shape, validity.iter().map(|&v| v != 0.0).collect())
    }

    /// `[n, n]` lower-triangular mask (row `i` sees columns `0..=i`).
    pub fn causal(n: usize) -> Self {
        let keep = (0..n * n).map(|i| i % n <= i / n).collect();
        Self {
            shape: vec![n, n],
            keep,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.keep.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: self.keep.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Logical AND with broadcasting.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        let shape = broadcast_shapes("mask_and", &self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut keep = vec![false; shape.iter().product()];
        zip_broadcast(&shape, &sa, &sb, |o, a, b| keep[o] = self.keep[a] && other.keep[b]);
        Ok(Mask { shape, keep })
    }
}
