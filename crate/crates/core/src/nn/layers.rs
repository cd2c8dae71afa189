//! Parameterised building blocks. Each layer owns only [`ParamId`]s; values
//! live in the [`ParamStore`] and activations in the [`Graph`].

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::rng::KeyedRng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut KeyedRng) -> Self {
        Linear {
            weight: store.add_xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng),
            bias: store.add_const(format!("{name}.bias"), &[d_out], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.layer_norm(x, ga, be)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut KeyedRng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let fan_out = c_out * kernel * kernel;
        Conv2d {
            weight: store.add_xavier(
                format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                fan_in,
                fan_out,
                rng,
            ),
            bias: store.add_const(format!("{name}.bias"), &[c_out], 0.0),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.stride)
    }
}

/// Multi-head self-attention without positional bias terms.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub d: usize,
    pub qkv: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut KeyedRng) -> Self {
        assert!(d.is_multiple_of(heads), "d={d} not divisible by heads={heads}");
        SelfAttention {
            heads,
            d,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let dh = self.d / self.heads;
        let qkv = self.qkv.forward(g, x);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, (h + 1) * dh);
            let k = g.slice_cols(qkv, self.d + h * dh, self.d + (h + 1) * dh);
            let v = g.slice_cols(qkv, 2 * self.d + h * dh, 2 * self.d + (h + 1) * dh);
            let scores = g.matmul_nt(q, k);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            heads.push(g.matmul(attn, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut KeyedRng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Depthwise temporal convolution followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pointwise: Linear,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, kernel: usize, rng: &mut KeyedRng) -> Self {
        ConvModule {
            weight: store.add_xavier(format!("{name}.depthwise"), &[d, kernel], kernel, kernel, rng),
            bias: store.add_const(format!("{name}.depthwise_bias"), &[d], 0.0),
            pointwise: Linear::new(store, &format!("{name}.pointwise"), d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.depthwise_conv1d(x, w, b);
        let h = g.gelu(h);
        self.pointwise.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Kernel of the depthwise sub-block; `None` gives a plain transformer block.
    pub conv_kernel: Option<usize>,
}

/// Pre-norm transformer block with an optional depthwise-conv sub-block
/// ("conformer-lite").
#[derive(Clone, Debug)]
pub struct Block {
    ln_attn: LayerNorm,
    attn: SelfAttention,
    ln_conv: Option<LayerNorm>,
    conv: Option<ConvModule>,
    ln_ff: LayerNorm,
    ff: FeedForward,
    ln_out: LayerNorm,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig, rng: &mut KeyedRng) -> Self {
        let d = cfg.d;
        let (ln_conv, conv) = match cfg.conv_kernel {
            Some(k) => (
                Some(LayerNorm::new(store, &format!("{name}.ln_conv"), d)),
                Some(ConvModule::new(store, &format!("{name}.conv"), d, k, rng)),
            ),
            None => (None, None),
        };
        Block {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            ln_conv,
            conv,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d * cfg.ff_mult, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.ln_attn.forward(g, x);
        let h = self.attn.forward(g, h);
        let mut x = g.add(x, h);
        if let (Some(ln), Some(conv)) = (&self.ln_conv, &self.conv) {
            let h = ln.forward(g, x);
            let h = conv.forward(g, h);
            x = g.add(x, h);
        }
        let h = self.ln_ff.forward(g, x);
        let h = self.ff.forward(g, h);
        let x = g.add(x, h);
        self.ln_out.forward(g, x)
    }
}

/// Two stride-2 convolutions over `[frames, features]` followed by a
/// projection to the model width: `T' -> ceil(T'/4)` frames.
#[derive(Clone, Debug)]
pub struct ConvSubsampler {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
    pub n_features: usize,
}

impl ConvSubsampler {
    pub const FACTOR: usize = 4;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_features: usize,
        channels: usize,
        d: usize,
        rng: &mut KeyedRng,
    ) -> Self {
        let f_out = n_features.div_ceil(2).div_ceil(2);
        ConvSubsampler {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 1, channels, 3, 2, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 2, rng),
            proj: Linear::new(store, &format!("{name}.proj"), channels * f_out, d, rng),
            n_features,
        }
    }

    pub fn output_len(frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }

    /// `feats` must be `[1, frames, n_features]`.
    pub fn forward(&self, g: &mut Graph, feats: NodeId) -> NodeId {
        let h = self.conv1.forward(g, feats);
        let h = g.gelu(h);
        let h = self.conv2.forward(g, h);
        let h = g.gelu(h);
        let h = g.channels_to_frames(h);
        self.proj.forward(g, h)
    }
}

/// Sinusoidal absolute position table `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = (10000f64).powf(-2.0 * i as f64 / d as f64);
            let a = pos as f64 * freq;
            data[pos * d + 2 * i] = a.sin() as f32;
            data[pos * d + 2 * i + 1] = a.cos() as f32;
        }
    }
    Tensor::from_parts(vec![t, d], data)
}
