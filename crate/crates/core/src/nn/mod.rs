//! Minimal neural-network toolkit: matrices, reverse-mode autodiff and
//! transformer layers.

pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Matrix, Scalar};
