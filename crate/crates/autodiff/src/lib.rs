//! Minimal reverse-mode automatic differentiation for dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Graph`] records primitives
//! (matrix products, 1-D convolution, row softmax, layer norm, fused
//! cross-entropy and a handful of element-wise maps) and replays them
//! backwards. [`AdamW`] updates a [`ParamStore`], and [`gradcheck`] compares
//! analytic gradients against central finite differences.
//!
//! ```
//! use neuroseq_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum(sq);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_with_params, GradCheckConfig, GradCheckReport};
pub use graph::{
    conv1d_geometry, gelu, log_sum_exp, sigmoid, CustomOp, Graph, Padding, Var,
};
pub use optim::AdamW;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
