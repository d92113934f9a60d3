//! Dense tensors with reverse-mode gradients.
//!
//! Everything differentiable in the crate is written against [`Graph`]. Models
//! are generic over [`Float`] so the same code trains in `f32` and is verified
//! with finite differences in `f64`.

mod container;
mod error;
mod float;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use container::Container;
pub use error::NumericsError;
pub use float::Float;
pub(crate) use float::{gemm_into, MatRef};
pub use gradcheck::{finite_difference_check, GradReport, ParamError, FULL_CHECK_LIMIT};
pub use graph::{nearest_codes, Gradients, Graph, Var};
#[allow(unused_imports)]
pub(crate) use graph::{dot, gelu_fwd, log_softmax_row, norm};
pub use optim::{AdamW, AdamWConfig};
pub use params::{collect_grads, forward_backward, ParamStore, ParamVars};
pub use rng::RngStreams;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
