use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// A zero tensor for every parameter, same order and shapes.
    pub fn zeros_like(&self) -> GradientMap {
        GradientMap {
            grads: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

/// Gradients keyed by parameter name; shapes mirror the owning store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: IndexMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.grads.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`, matching by name.
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        for (name, g) in &other.grads {
            let dst = self
                .grads
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            if dst.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "accumulate",
                    lhs: dst.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
