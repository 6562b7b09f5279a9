//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they run. Calling
//! [`Graph::backward`] on a scalar result replays the tape in reverse and
//! returns a [`GradientMap`] keyed by parameter name. Every op rejects
//! non-finite results at the point they are produced.
//!
//! ```
//! use thoughtroute_autodiff::{Graph, ParameterStore, Tensor};
//!
//! let mut store = ParameterStore::new();
//! store.insert("theta", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
//! let mut g = Graph::with_store(&store);
//! let t = g.param("theta").unwrap();
//! let sq = g.mul(t, t).unwrap();
//! let loss = g.sum_all(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("theta").unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod mask;
mod ops;
mod store;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use mask::Mask;
pub use store::{GradientMap, ParameterStore};
pub use tensor::Tensor;
