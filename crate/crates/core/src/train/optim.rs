//! Adam with decoupled weight decay.

use thoughtroute_autodiff::{GradientMap, ParameterStore, Tensor, TensorError};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
            weight_decay: 3e-3,
        }
    }
}

/// First and second moments, one tensor per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update at learning rate `lr`:
    /// `θ ← θ − lr·wd·θ − lr·m̂ / (√v̂ + eps)`.
    pub fn update(&mut self, params: &mut ParameterStore, grads: &GradientMap, lr: f64, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (th, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *th -= lr * cfg.weight_decay * *th;
                *th -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
