//! Stateless tensor kernels with their hand-written backward passes.
//!
//! The [`Tape`](crate::autograd::Tape) records calls into these functions;
//! they are also usable directly for inference-only code paths.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod norm;

pub use activation::{gelu, prelu, sigmoid, softmax};
pub use conv::{conv3d, conv_transpose3d, ConvSpec};
pub use dense::{linear, matmul};
pub use norm::{batch_norm_train, layer_norm};
