use rand::distr::Open01;
use rand::Rng;

use super::config::{MsmConfig, Variant};
use crate::error::{AtmError, Result};
use crate::masking::MaskPlan;
use crate::nn::layers::{sinusoidal_positions, Block, BlockConfig, ConvSubsampler, Linear};
use crate::nn::tensor::argmax;
use crate::nn::{Checkpoint, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::{keyed, Stream};

/// Graph nodes produced by the quantizer for one utterance.
pub struct QuantizerOutput {
    /// Unperturbed code logits `[T, L]`.
    pub logits: NodeId,
    /// Gumbel-softmax distribution `[T, L]`.
    pub soft: NodeId,
    /// Code selection fed forward: straight-through one-hot, or `soft`.
    pub selection: NodeId,
    /// Quantized vectors `selection · codebook`, `[T, code_dim]`.
    pub q: NodeId,
    /// `argmax` of the perturbed logits per frame.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MsmModel {
    pub config: MsmConfig,
    pub store: ParamStore,
    encoder: ConvSubsampler,
    mask_emb: ParamId,
    quant_proj: Linear,
    codebook: ParamId,
    context: Vec<Block>,
    proj_c: Linear,
    proj_q: Linear,
    bert: Vec<Block>,
    ce_head: Option<Linear>,
}

impl MsmModel {
    pub fn new(config: MsmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed(seed, Stream::Init, 2, 0);
        let mut store = ParamStore::new();
        let d = config.d;
        let encoder = ConvSubsampler::new(&mut store, "encoder", config.n_mels, config.channels, d, &mut rng);
        let mask_emb = store.add_normal("mask_emb", &[d], 0.1, &mut rng);
        let quant_proj = Linear::new(&mut store, "quantizer.proj", d, config.codebook, &mut rng);
        let codebook = store.add_normal("quantizer.codebook", &[config.codebook, config.code_dim], 1.0, &mut rng);
        let block = BlockConfig {
            d,
            heads: config.heads,
            ff_mult: config.ff_mult,
            conv_kernel: config.conv_kernel,
        };
        let context = (0..config.context_blocks)
            .map(|i| Block::new(&mut store, &format!("context.block{i}"), block, &mut rng))
            .collect();
        let proj_c = Linear::new(&mut store, "proj_c", d, config.proj_dim, &mut rng);
        let proj_q = Linear::new(&mut store, "proj_q", config.code_dim, config.proj_dim, &mut rng);
        let (bert, ce_head) = match config.variant {
            Variant::W2v2 => (Vec::new(), None),
            Variant::W2vBert => (
                (0..config.bert_blocks)
                    .map(|i| Block::new(&mut store, &format!("bert.block{i}"), block, &mut rng))
                    .collect(),
                Some(Linear::new(&mut store, "ce_head", d, config.codebook, &mut rng)),
            ),
        };
        Ok(MsmModel {
            config,
            store,
            encoder,
            mask_emb,
            quant_proj,
            codebook,
            context,
            proj_c,
            proj_q,
            bert,
            ce_head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// `E = Φ(X)`: `[T', n_mels]` features to `[ceil(T'/4), d]`.
    pub fn encode(&self, g: &mut Graph, feats: &Tensor) -> Result<NodeId> {
        if feats.shape().len() != 2 || feats.cols() != self.config.n_mels {
            return Err(AtmError::Shape(format!(
                "encoder expects [frames, {}] features, got {:?}",
                self.config.n_mels,
                feats.shape()
            )));
        }
        if feats.rows() < ConvSubsampler::FACTOR {
            return Err(AtmError::Length(format!("{} feature frames, need at least 4", feats.rows())));
        }
        let x = g.constant(feats.clone().reshape(&[1, feats.rows(), feats.cols()])?);
        Ok(self.encoder.forward(g, x))
    }

    /// Replaces masked rows of `e` by the learned mask embedding.
    pub fn apply_mask(&self, g: &mut Graph, e: NodeId, plan: &MaskPlan) -> Result<NodeId> {
        let t = g.value(e).rows();
        if plan.len != t {
            return Err(AtmError::Contract(format!("mask plan over {} frames, sequence has {t}", plan.len)));
        }
        let m = g.param(self.mask_emb);
        Ok(g.mask_rows(e, m, &plan.mask))
    }

    /// Gumbel-softmax quantization of `e` at temperature `tau`; noise is
    /// drawn from `rng` unless disabled in the config.
    pub fn quantize<R: Rng + ?Sized>(&self, g: &mut Graph, e: NodeId, tau: f64, rng: &mut R) -> Result<QuantizerOutput> {
        if tau <= 0.0 {
            return Err(AtmError::Contract(format!("temperature must be positive, got {tau}")));
        }
        let logits = self.quant_proj.forward(g, e);
        let (t, l) = (g.value(logits).rows(), g.value(logits).cols());
        let noise = if self.config.gumbel_noise {
            // Inverse CDF on the open interval: a draw of exactly 0 or 1
            // would give an infinite sample.
            let gumbel = |u: f64| (-(-u.ln()).ln()) as f32;
            Tensor::new(&[t, l], (0..t * l).map(|_| gumbel(rng.sample(Open01))).collect())?
        } else {
            Tensor::zeros(&[t, l])
        };
        let perturbed = g.add_const(logits, &noise);
        let targets = g.value(perturbed).argmax_rows();
        let scaled = g.scale(perturbed, (1.0 / tau) as f32);
        let soft = g.softmax(scaled);
        let selection = if self.config.hard_codes {
            let mut hard = vec![0.0; t * l];
            for (i, row) in g.value(soft).data().chunks(l).enumerate() {
                hard[i * l + argmax(row)] = 1.0;
            }
            g.straight_through(soft, Tensor::new(&[t, l], hard)?)
        } else {
            soft
        };
        let cb = g.param(self.codebook);
        let q = g.matmul(selection, cb);
        Ok(QuantizerOutput {
            logits,
            soft,
            selection,
            q,
            targets,
        })
    }

    /// Context network Ω over (masked) encodings.
    pub fn context(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let t = g.value(x).rows();
        let mut h = g.add_const(x, &sinusoidal_positions(t, self.config.d));
        for b in &self.context {
            h = b.forward(g, h);
        }
        h
    }

    /// Projections of context outputs and quantized vectors into the
    /// contrastive space.
    pub fn project(&self, g: &mut Graph, c: NodeId, q: NodeId) -> (NodeId, NodeId) {
        (self.proj_c.forward(g, c), self.proj_q.forward(g, q))
    }

    /// Second network Λ and the code-prediction head; w2v-BERT only.
    pub fn ce_logits(&self, g: &mut Graph, c: NodeId) -> Result<NodeId> {
        let head = self
            .ce_head
            .as_ref()
            .ok_or_else(|| AtmError::Contract("cross-entropy head requested on a w2v2 model".into()))?;
        let mut h = c;
        for b in &self.bert {
            h = b.forward(g, h);
        }
        Ok(head.forward(g, h))
    }

    /// Frozen representation for probing on unmasked input. Layer 0 is
    /// the feature encoder, then one per context block, then the w2v-BERT
    /// blocks; `None` selects the last context block.
    pub fn represent(&self, feats: &Tensor, layer: Option<usize>) -> Result<Tensor> {
        let depth = self.context.len() + self.bert.len();
        let layer = layer.unwrap_or(self.context.len());
        if layer > depth {
            return Err(AtmError::Config(format!("representation layer {layer} beyond depth {depth}")));
        }
        let mut g = Graph::new(&self.store);
        let mut h = self.encode(&mut g, feats)?;
        if layer > 0 {
            let t = g.value(h).rows();
            h = g.add_const(h, &sinusoidal_positions(t, self.config.d));
        }
        for b in self.context.iter().chain(&self.bert).take(layer) {
            h = b.forward(&mut g, h);
        }
        Ok(g.value(h).clone())
    }

    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Checkpoint {
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("kind".into(), "msm".into());
            obj.insert("msm".into(), serde_json::to_value(&self.config).expect("config serialises"));
        }
        let mut ck = Checkpoint::new(meta);
        ck.push_store("model.", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("msm") {
            return Err(AtmError::Checkpoint("not an MSM checkpoint".into()));
        }
        let config: MsmConfig = serde_json::from_value(ck.meta["msm"].clone())
            .map_err(|e| AtmError::Checkpoint(format!("msm config: {e}")))?;
        let mut model = MsmModel::new(config, 0)?;
        ck.restore_store("model.", &mut model.store)?;
        Ok(model)
    }
}
