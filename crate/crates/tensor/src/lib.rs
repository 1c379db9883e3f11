//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: the op set covers what modulated
//! convolutional generators, their discriminators, and latent optimization
//! need, and every op is generic over `f32`/`f64` so gradients can be
//! checked against central differences in double precision.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, MatRef, Real};
pub use tensor::{contiguous_strides, numel, Tensor};
