//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Built for small sequence models: convolutions (1-D, 2-D, depthwise),
//! attention building blocks, layer norm, CTC, and an Adam optimizer.
//! Batch-level kernels run on rayon when the `parallel` feature is on.

pub mod ctc;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod ops;
pub mod optim;
pub mod par;
mod params;
mod tensor;

pub use ctc::CTC_INFEASIBLE_LOSS;
pub use graph::{Gradients, Graph, Var};
pub use ops::{concat, conv1d, conv2d, ctc_nll, depthwise_conv1d, rel_pos_bias};
pub use optim::{Adam, AdamConfig};
pub use params::{add_grads, grad_norm, Binder, ParamId, ParamStore};
pub use tensor::{broadcast_shape, numel, strides, Tensor};
