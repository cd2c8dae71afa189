//! Dense tensors, reverse-mode differentiation, layers, optimiser and
//! checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{adam_step, reduce_gradients, scheduled_lr, AdamConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
