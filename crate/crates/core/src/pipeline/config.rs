//! Resolved run configuration: one JSON document, every field defaulted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::features::{CorpusConfig, FeatureConfig};
use crate::masking::{MaskStrategy, StrategyKind};
use crate::msm::{MsmConfig, ScaleMode};
use crate::nn::AdamConfig;
use crate::scorer::{ScorerConfig, ScorerTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub strategy: StrategyKind,
    pub mask_fraction: f64,
    pub context: usize,
    pub scale_mode: ScaleMode,
    pub frame_participation: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Write `msm-step{k}.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            strategy: StrategyKind::Random,
            mask_fraction: 0.4,
            context: 10,
            scale_mode: ScaleMode::None,
            frame_participation: 1.0,
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig {
                peak_lr: 2e-3,
                warmup_steps: 100,
                ..AdamConfig::default()
            },
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn mask_strategy(&self) -> MaskStrategy {
        MaskStrategy {
            kind: self.strategy,
            mask_fraction: self.mask_fraction,
            context: self.context,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: vec![0.3, 0.4, 0.5],
            strategies: vec![StrategyKind::Random, StrategyKind::High],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Plans drawn per strategy for the ordering test, spread round-robin
    /// over the cached utterances.
    pub plans: usize,
    pub strategies: Vec<StrategyKind>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            plans: 10_000,
            strategies: StrategyKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Labelled corpus the head is trained on; defaults to `manifest`.
    pub train_manifest: Option<PathBuf>,
    /// Corpora evaluated, reported per domain; defaults to the training one.
    pub eval_manifests: Vec<PathBuf>,
    /// Encoder layer probed: 0 is the feature encoder, then context blocks
    /// and w2v-BERT blocks in order. Unset means the last context block.
    pub layer: Option<usize>,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_manifest: None,
            eval_manifests: Vec::new(),
            layer: None,
            steps: 300,
            batch_size: 8,
            adam: AdamConfig {
                peak_lr: 5e-3,
                warmup_steps: 30,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub manifest: Option<PathBuf>,
    pub scorer: ScorerConfig,
    pub scorer_training: ScorerTrainConfig,
    pub scorer_checkpoint: Option<PathBuf>,
    pub confidence_cache: Option<PathBuf>,
    pub model: MsmConfig,
    pub pretrain: PretrainConfig,
    pub msm_checkpoint: Option<PathBuf>,
    pub sweep: SweepConfig,
    pub analysis: AnalysisConfig,
    pub probe: ProbeConfig,
    /// Fill `wall_ms` in metrics; off by default so reruns are byte-identical.
    pub record_wall_time: bool,
}


/// What a command needs from the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    SynthData,
    TrainScorer,
    Score,
    Pretrain,
    Sweep,
    AnalyzeMask,
    Probe,
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| AtmError::Config(format!("{what} path is not set")))?;
    if !p.exists() {
        return Err(AtmError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found"))));
    }
    Ok(p)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AtmError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AtmError::json(path, e))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn to_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        require(&self.manifest, "manifest")
    }

    /// Confidence cache, required only when masking or scaling reads scores.
    pub fn cache_path(&self, strategies: &[StrategyKind]) -> Result<Option<&Path>> {
        let needed = strategies.iter().any(|s| s.needs_scores()) || self.pretrain.scale_mode != ScaleMode::None;
        if needed || self.confidence_cache.is_some() {
            require(&self.confidence_cache, "confidence cache").map(Some)
        } else {
            Ok(None)
        }
    }

    /// Range checks plus existence of every path `cmd` reads.
    pub fn validate(&self, cmd: Command) -> Result<()> {
        let p = &self.pretrain;
        p.mask_strategy().validate()?;
        if !(0.0..=1.0).contains(&p.frame_participation) {
            return Err(AtmError::Config(format!(
                "frame_participation {} outside [0, 1]",
                p.frame_participation
            )));
        }
        if p.batch_size == 0 || self.scorer_training.batch_size == 0 || self.probe.batch_size == 0 {
            return Err(AtmError::Config("batch sizes must be positive".into()));
        }
        let n_mels = self.features.n_mels;
        match cmd {
            Command::SynthData => self.corpus.validate()?,
            Command::TrainScorer => {
                self.scorer.validate()?;
                self.manifest_path()?;
                if self.scorer.n_mels != n_mels {
                    return Err(AtmError::Config(format!(
                        "scorer expects {} mel bands, features produce {n_mels}",
                        self.scorer.n_mels
                    )));
                }
            }
            Command::Score => {
                self.manifest_path()?;
                require(&self.scorer_checkpoint, "scorer checkpoint")?;
            }
            Command::Pretrain | Command::Sweep => {
                self.model.validate()?;
                self.manifest_path()?;
                if self.model.n_mels != n_mels {
                    return Err(AtmError::Config(format!(
                        "model expects {} mel bands, features produce {n_mels}",
                        self.model.n_mels
                    )));
                }
                if cmd == Command::Sweep {
                    for &f in &self.sweep.fractions {
                        if !(f > 0.0 && f <= 1.0) {
                            return Err(AtmError::Config(format!("sweep fraction {f} outside (0, 1]")));
                        }
                    }
                    self.cache_path(&self.sweep.strategies)?;
                } else {
                    self.cache_path(&[p.strategy])?;
                }
            }
            Command::AnalyzeMask => {
                require(&self.confidence_cache, "confidence cache")?;
            }
            Command::Probe => {
                if self.msm_checkpoint.is_some() {
                    require(&self.msm_checkpoint, "MSM checkpoint")?;
                }
                match &self.probe.train_manifest {
                    Some(_) => {
                        require(&self.probe.train_manifest, "probe training manifest")?;
                    }
                    None => {
                        self.manifest_path()?;
                    }
                }
                for m in &self.probe.eval_manifests {
                    require(&Some(m.clone()), "probe evaluation manifest")?;
                }
            }
        }
        Ok(())
    }
}
