use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Contrastive + diversity.
    #[serde(rename = "w2v2")]
    W2v2,
    /// Adds a second context network and a masked cross-entropy term.
    #[serde(rename = "w2v-bert")]
    W2vBert,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::W2v2 => "w2v2",
            Variant::W2vBert => "w2v-bert",
        })
    }
}

impl FromStr for Variant {
    type Err = AtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2v2" => Ok(Variant::W2v2),
            "w2v-bert" => Ok(Variant::W2vBert),
            _ => Err(AtmError::Config(format!("unknown variant `{s}` (w2v2|w2v-bert)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    #[default]
    None,
    /// Whole per-utterance objective times `s_u`.
    Utterance,
    /// Per-masked-frame terms times `s_t` for a Bernoulli subset of utterances.
    Frame,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::None => "none",
            ScaleMode::Utterance => "utterance",
            ScaleMode::Frame => "frame",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = AtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ScaleMode::None),
            "utterance" => Ok(ScaleMode::Utterance),
            "frame" => Ok(ScaleMode::Frame),
            _ => Err(AtmError::Config(format!("unknown scale mode `{s}` (none|utterance|frame)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsmConfig {
    pub variant: Variant,
    pub n_mels: usize,
    pub channels: usize,
    pub d: usize,
    pub heads: usize,
    pub context_blocks: usize,
    pub bert_blocks: usize,
    pub ff_mult: usize,
    pub conv_kernel: Option<usize>,
    /// Codebook size `L`.
    pub codebook: usize,
    pub code_dim: usize,
    /// Width of the space where contrastive similarities are taken.
    pub proj_dim: usize,
    pub n_distractors: usize,
    pub kappa: f64,
    pub diversity_weight: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub diversity_masked_only: bool,
    pub gumbel_noise: bool,
    /// Straight-through one-hot codes; `false` feeds the soft distribution
    /// forward (smooth, used for finite-difference checks).
    pub hard_codes: bool,
}

impl Default for MsmConfig {
    fn default() -> Self {
        MsmConfig {
            variant: Variant::W2v2,
            n_mels: 80,
            channels: 16,
            d: 128,
            heads: 4,
            context_blocks: 2,
            bert_blocks: 2,
            ff_mult: 4,
            conv_kernel: Some(7),
            codebook: 64,
            code_dim: 128,
            proj_dim: 128,
            n_distractors: 10,
            kappa: 0.1,
            diversity_weight: 0.1,
            tau_start: 2.0,
            tau_end: 0.5,
            diversity_masked_only: true,
            gumbel_noise: true,
            hard_codes: true,
        }
    }
}

impl MsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(AtmError::Config(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.codebook < 2 {
            return Err(AtmError::Config("codebook needs at least two entries".into()));
        }
        if !(self.kappa > 0.0 && self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(AtmError::Config("kappa and temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Linear anneal from `tau_start` at step 1 to `tau_end` at `total`.
    pub fn tau(&self, step: u64, total: u64) -> f64 {
        let frac = if total <= 1 {
            1.0
        } else {
            (step.saturating_sub(1) as f64 / (total - 1) as f64).min(1.0)
        };
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }
}
