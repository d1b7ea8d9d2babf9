//! Reverse-mode automatic differentiation for small 3D convolutional
//! networks on the CPU.
//!
//! Tensors are dense and row-major; convolutions lower to `im2col` plus a
//! single matrix product per sample. Everything is generic over [`Real`] so
//! the same network can be trained in `f32` and gradient-checked in `f64`.

pub mod conv;
pub mod graph;
pub mod optim;
pub mod param;
pub mod real;
pub mod tensor;

pub use conv::ConvParams;
pub use graph::{Gradients, Graph, NodeId};
pub use optim::Adam;
pub use param::{ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
