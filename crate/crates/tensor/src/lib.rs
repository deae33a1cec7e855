//! A compact reverse-mode automatic differentiation engine for 3D volumes.
//!
//! The engine is deliberately small: `f32` row-major tensors, a tape
//! ([`Graph`]) rebuilt for every forward pass, named parameter stores and an
//! AdamW optimizer. Kernels are written against [`par`], which dispatches to
//! rayon when the `parallel` feature is enabled and otherwise runs
//! sequentially with identical results.

pub mod gradcheck;
mod graph;
pub mod ops;
pub mod optim;
pub mod par;
mod params;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Graph, Var};
pub use ops::elementwise::Unary;
pub use ops::filter::{filter_axis, gaussian_kernel, Border};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{numel, Tensor};
