//! Dense tensors, reverse-mode differentiation, layers and the Adam optimizer.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_parameters, finite_difference_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::{mlp_forward, multi_head_attention, Activation, AttentionOutput};
pub use optim::{adam_step, AdamConfig, AdamState, Grads, ParamEntry, ParameterStore};
pub use tensor::{IndexTensor, Tensor};
