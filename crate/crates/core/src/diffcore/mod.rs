//! Minimal differentiable tensor layer: NCHW tensors, a reverse-mode tape,
//! Adam, and finite-difference gradient verification.

mod adam;
mod conv;
pub mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use adam::{AdamState, Moments};
pub use graph::{BatchStats, Gradients, Graph, NormMode, Var};
pub use param::Parameter;
pub use tensor::{Shape, Tensor4};
