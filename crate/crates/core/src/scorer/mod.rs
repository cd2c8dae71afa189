//! Frame-synchronous CTC scorer whose per-frame maximum posterior serves
//! as the masking confidence.

pub mod confidence;
pub mod ctc;
pub mod model;
pub mod train;

pub use confidence::{
    read_cache, score_frames, write_cache, CacheRecord, ConfidenceTrack, PosteriorGrid,
};
pub use model::{ScorerConfig, ScorerModel};
pub use train::{prepare_labeled, train_scorer, LabeledExample, ScorerStepLog, ScorerTrainConfig, ScorerTrainer};
