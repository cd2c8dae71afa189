use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::nn::layers::{sinusoidal_positions, Block, BlockConfig, ConvSubsampler, Linear};
use crate::nn::{Checkpoint, Graph, NodeId, ParamStore, Tensor};
use crate::rng::{keyed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    /// Number of real labels; the blank is appended as class `vocab`.
    pub vocab: usize,
    pub n_mels: usize,
    pub channels: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub conv_kernel: Option<usize>,
    /// Take the confidence maximum over real labels only.
    pub confidence_excludes_blank: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            vocab: 8,
            n_mels: 80,
            channels: 16,
            d: 128,
            heads: 4,
            blocks: 2,
            ff_mult: 4,
            conv_kernel: Some(7),
            confidence_excludes_blank: false,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(AtmError::Config(format!("scorer vocab must be >= 2, got {}", self.vocab)));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(AtmError::Config(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ScorerModel {
    pub config: ScorerConfig,
    pub store: ParamStore,
    frontend: ConvSubsampler,
    blocks: Vec<Block>,
    head: Linear,
}

impl ScorerModel {
    pub fn new(config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed(seed, Stream::Init, 1, 0);
        let mut store = ParamStore::new();
        let frontend =
            ConvSubsampler::new(&mut store, "frontend", config.n_mels, config.channels, config.d, &mut rng);
        let block_cfg = BlockConfig {
            d: config.d,
            heads: config.heads,
            ff_mult: config.ff_mult,
            conv_kernel: config.conv_kernel,
        };
        let blocks = (0..config.blocks)
            .map(|i| Block::new(&mut store, &format!("block{i}"), block_cfg, &mut rng))
            .collect();
        let head = Linear::new(&mut store, "head", config.d, config.vocab + 1, &mut rng);
        Ok(ScorerModel {
            config,
            store,
            frontend,
            blocks,
            head,
        })
    }

    pub fn blank(&self) -> usize {
        self.config.vocab
    }

    pub fn classes(&self) -> usize {
        self.config.vocab + 1
    }

    /// Unnormalised `[ceil(T'/4), vocab + 1]` logits for `[T', n_mels]` features.
    pub fn logits(&self, g: &mut Graph, feats: &Tensor) -> Result<NodeId> {
        if feats.shape().len() != 2 || feats.cols() != self.config.n_mels {
            return Err(AtmError::Shape(format!(
                "scorer expects [frames, {}] features, got {:?}",
                self.config.n_mels,
                feats.shape()
            )));
        }
        if feats.rows() < ConvSubsampler::FACTOR {
            return Err(AtmError::Length(format!("{} feature frames, need at least 4", feats.rows())));
        }
        let x = g.constant(feats.clone().reshape(&[1, feats.rows(), feats.cols()])?);
        let mut h = self.frontend.forward(g, x);
        let t = g.value(h).rows();
        h = g.add_const(h, &sinusoidal_positions(t, self.config.d));
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        Ok(self.head.forward(g, h))
    }

    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Checkpoint {
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("kind".into(), "scorer".into());
            obj.insert("scorer".into(), serde_json::to_value(&self.config).expect("config serialises"));
        }
        let mut ck = Checkpoint::new(meta);
        ck.push_store("model.", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("scorer") {
            return Err(AtmError::Checkpoint("not a scorer checkpoint".into()));
        }
        let config: ScorerConfig = serde_json::from_value(ck.meta["scorer"].clone())
            .map_err(|e| AtmError::Checkpoint(format!("scorer config: {e}")))?;
        let mut model = ScorerModel::new(config, 0)?;
        ck.restore_store("model.", &mut model.store)?;
        Ok(model)
    }
}
