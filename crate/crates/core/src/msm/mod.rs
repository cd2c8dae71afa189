//! Masked speech modelling: encoder, quantizer, context networks, losses
//! and confidence-scaled batch steps.

pub mod config;
pub mod losses;
pub mod model;
pub mod step;

pub use config::{MsmConfig, ScaleMode, Variant};
pub use losses::{diversity_loss, loss_weights, scale_loss, LossWeights};
pub use model::{MsmModel, QuantizerOutput};
pub use step::{msm_forward, msm_step, BatchItem, LossBreakdown, StepOptions};
