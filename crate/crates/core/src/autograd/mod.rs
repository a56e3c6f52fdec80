//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves via [`Graph::param`], every operation appends a node holding its
//! cached output, and [`Graph::backward`] walks the tape once in reverse.

mod graph;
pub mod kernels;
pub mod optim;
mod tensor;

pub use graph::{BnMode, BnState, Gradients, Graph, Var, BN_EPS};
pub use kernels::{ConvSpec, PoolSpec};
pub use optim::{Adam, SgdMomentum};
pub use tensor::Tensor;
