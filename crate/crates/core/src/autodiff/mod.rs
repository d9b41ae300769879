//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;

pub use graph::{Activation, Combine, Graph, Var, IGNORE_LABEL};
pub use gradcheck::grad_check;
