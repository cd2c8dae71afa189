//! Confidence-guided masked speech modeling.
//!
//! A CTC scorer rates every encoded frame; mask blocks for masked speech
//! pretraining start preferentially at frames it is confident about, and
//! the pretraining loss can be reweighted by those confidences.

pub mod error;
pub mod features;
pub mod masking;
pub mod msm;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod scorer;
pub mod stats;

pub use error::{AtmError, Result};
