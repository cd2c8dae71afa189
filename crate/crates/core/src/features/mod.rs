//! Waveform ingestion, log-Mel frontend and the synthetic corpus.

pub mod logmel;
pub mod manifest;
pub mod synth;
pub mod wav;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};

pub use logmel::{logmel, FeatureConfig, FeatureSequence, LogMel, MelFilterbank};
pub use manifest::{load_manifest, write_manifest, ManifestRecord};
pub use synth::{synth_corpus, synth_corpus_with, synth_utterance, CorpusConfig, DomainConfig, Segment};
pub use wav::SAMPLE_RATE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub labels: Option<Vec<usize>>,
    pub domain: String,
}

impl Utterance {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, domain: impl Into<String>) -> Self {
        Utterance {
            id: id.into(),
            samples,
            sample_rate: SAMPLE_RATE,
            labels: None,
            domain: domain.into(),
        }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Checks the label invariants against a label set of size `vocab`.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(AtmError::SampleRate(self.sample_rate));
        }
        if let Some(labels) = &self.labels {
            if labels.is_empty() {
                return Err(AtmError::Data(format!("{}: empty label sequence", self.id)));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= vocab) {
                return Err(AtmError::Data(format!(
                    "{}: label {bad} outside vocabulary of size {vocab}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

pub fn load_wav(path: &Path) -> Result<Utterance> {
    let samples = wav::read_wav(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Utterance::new(id, samples, "clean"))
}
