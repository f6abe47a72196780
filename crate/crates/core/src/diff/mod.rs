//! Minimal differentiable operator set for the periodic autoencoder.
//!
//! Only the operators the model needs are provided, each with an analytic
//! backward pass: same-length 1-D convolution, batch norm, ELU, affine maps,
//! the atan2 phase head, a real DFT and the spectral statistics derived from
//! it, the sinusoidal latent reconstruction, and the squared-error losses.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckEntry, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{BnMode, Gradients, Graph, NodeId};
pub use graph::wrap_phase;
pub use tensor::Tensor;
