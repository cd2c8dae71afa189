//! Per-frame confidences `s_t = max_l p(v_t = l | E)` and their cache.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ScorerModel;
use crate::error::{AtmError, Result};
use crate::features::FeatureSequence;
use crate::nn::graph::softmax_rows;
use crate::nn::{Graph, Tensor};

/// Row-stochastic `[T, vocab + 1]` label posteriors (blank last).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    pub probs: Tensor,
}

impl PosteriorGrid {
    pub fn from_logits(logits: &Tensor) -> Self {
        PosteriorGrid {
            probs: softmax_rows(logits),
        }
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    /// Row maxima; with `exclude_blank` the last column is ignored.
    pub fn confidence(&self, exclude_blank: bool) -> ConfidenceTrack {
        let c = self.probs.cols();
        let take = if exclude_blank { c - 1 } else { c };
        let scores = (0..self.frames())
            .map(|t| self.probs.row(t)[..take].iter().copied().fold(0.0, f32::max))
            .collect();
        ConfidenceTrack::new(scores)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTrack {
    pub scores: Vec<f32>,
    pub utterance_mean: f64,
}

impl ConfidenceTrack {
    pub fn new(scores: Vec<f32>) -> Self {
        let utterance_mean = mean(&scores);
        ConfidenceTrack { scores, utterance_mean }
    }

    pub fn constant(len: usize, value: f32) -> Self {
        Self::new(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn mean(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64
}

pub fn score_frames(model: &ScorerModel, feats: &FeatureSequence) -> Result<(ConfidenceTrack, PosteriorGrid)> {
    let mut g = Graph::new(&model.store);
    let logits = model.logits(&mut g, &feats.frames)?;
    if let Some((node, op)) = g.non_finite() {
        return Err(AtmError::NumericFailure { node, op });
    }
    let grid = PosteriorGrid::from_logits(g.value(logits));
    Ok((grid.confidence(model.config.confidence_excludes_blank), grid))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub utt_id: String,
    pub scores: Vec<f32>,
    pub s_u: f64,
}

impl CacheRecord {
    pub fn new(utt_id: impl Into<String>, track: &ConfidenceTrack) -> Self {
        CacheRecord {
            utt_id: utt_id.into(),
            scores: track.scores.clone(),
            s_u: track.utterance_mean,
        }
    }

    pub fn track(&self) -> ConfidenceTrack {
        ConfidenceTrack {
            scores: self.scores.clone(),
            utterance_mean: self.s_u,
        }
    }
}

pub fn write_cache(path: &Path, records: &[CacheRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| AtmError::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| AtmError::io(path, e))?;
    f.write_all(&out).map_err(|e| AtmError::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<CacheRecord>> {
    let text = fs::read_to_string(path).map_err(|e| AtmError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| AtmError::json(path, e)))
        .collect()
}
