//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations applied to [`Var`] handles during a
//! forward pass; [`Graph::backward`] then returns the gradient of a scalar
//! loss with respect to every leaf created with [`Graph::param`].
//!
//! ```
//! use fsaug_autograd::{Graph, Tensor};
//! use std::sync::Arc;
//!
//! let g = Graph::<f64>::new();
//! let w = g.param(Arc::new(Tensor::new(&[2, 1], vec![3.0, -1.0])));
//! let x = g.constant(Tensor::new(&[1, 2], vec![2.0, 5.0]));
//! let loss = x.matmul(w).square().sum();
//! let grads = g.backward(loss);
//! // d/dw (x.w)^2 = 2 (x.w) x = 2 * 1 * (2, 5)
//! assert_eq!(grads.wrt(w).unwrap().data(), &[4.0, 10.0]);
//! ```

mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::{sigmoid, softplus};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::Tensor;
