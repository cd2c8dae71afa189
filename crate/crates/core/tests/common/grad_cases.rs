//! Finite-difference cases shared by the gradient tests and the acceptance
//! suite: every layer type, and the full MSM step for both variants.

use atm_core::masking::{MaskStrategy, StrategyKind};
use atm_core::msm::{msm_forward, msm_step, BatchItem, MsmConfig, MsmModel, ScaleMode, StepOptions, Variant};
use atm_core::nn::graph::{Graph, NodeId};
use atm_core::nn::layers::{Block, BlockConfig, Conv2d, ConvModule, FeedForward, LayerNorm, Linear, SelfAttention};
use atm_core::nn::{gradient_check, ParamStore, Tensor};
use atm_core::par::Execution;
use atm_core::rng::{keyed, Stream};
use atm_core::scorer::ConfidenceTrack;
use rand::Rng;

use super::finite_difference_error;

pub const EPS: f32 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Base step for the end-to-end checks; large enough that f32 rounding in
/// the loss stays well below the tolerance.
pub const FD_STEP: f32 = 4e-2;

pub fn random(shape: &[usize], seed: u64, salt: u64, grad: bool) -> Tensor {
    let mut rng = keyed(seed, Stream::Test, salt, 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .unwrap()
        .with_grad(grad)
}

/// Random linear functional of a node so every output element matters.
pub fn project(g: &mut Graph, y: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(y).to_vec();
    let r = random(&shape, seed, 999, false);
    let w = g.mul_const(y, r);
    g.sum(w)
}

pub struct Case {
    pub name: &'static str,
    /// Maximum relative error for one seed.
    pub run: fn(u64) -> f64,
}

pub fn layer_cases() -> Vec<Case> {
    vec![
        Case {
            name: "linear",
            run: |seed| {
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "lin", 4, 3, &mut keyed(seed, Stream::Init, 0, 0));
            let x = random(&[5, 4], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = lin.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "conv2d",
            run: |seed| {
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, &mut keyed(seed, Stream::Init, 0, 0));
            let x = random(&[2, 7, 6], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = conv.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "layer_norm",
            run: |seed| {
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut store, "ln", 6);
            let x = random(&[4, 6], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = ln.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "attention(1 head)",
            run: |seed| {
            let mut store = ParamStore::new();
            let att = SelfAttention::new(&mut store, "a", 8, 1, &mut keyed(seed, Stream::Init, 0, 0));
            let x = random(&[5, 8], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = att.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "attention(2 heads)",
            run: |seed| {
            let mut store = ParamStore::new();
            let att = SelfAttention::new(&mut store, "a", 8, 2, &mut keyed(seed, Stream::Init, 0, 0));
            let x = random(&[4, 8], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = att.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "feed_forward",
            run: |seed| {
            let mut store = ParamStore::new();
            let ff = FeedForward::new(&mut store, "ff", 4, 8, &mut keyed(seed, Stream::Init, 0, 0));
            let x = random(&[3, 4], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = ff.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "gelu",
            run: |seed| {
            let store = ParamStore::new();
            let x = random(&[3, 5], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = g.gelu(ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "softmax",
            run: |seed| {
            let store = ParamStore::new();
            let x = random(&[3, 5], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = g.softmax(ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "log_softmax",
            run: |seed| {
            let store = ParamStore::new();
            let x = random(&[3, 5], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = g.log_softmax(ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "embedding",
            run: |seed| {
            let mut store = ParamStore::new();
            let table = store.add("table", random(&[6, 4], seed, 2, true));
            gradient_check(&store, &[], EPS, |g, _| {
                let t = g.param(table);
                let y = g.select_rows(t, &[0, 3, 3, 5]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "conv_module",
            run: |seed| {
            let mut store = ParamStore::new();
            let m = ConvModule::new(&mut store, "cm", 4, 5, &mut keyed(seed, Stream::Init, 0, 0));
            let x = random(&[6, 4], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = m.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "block",
            run: |seed| {
            let mut store = ParamStore::new();
            let cfg = BlockConfig { d: 8, heads: 2, ff_mult: 2, conv_kernel: Some(3) };
            let b = Block::new(&mut store, "b", cfg, &mut keyed(seed, Stream::Init, 0, 0));
            let x = random(&[4, 8], seed, 1, true);
            gradient_check(&store, &[x], EPS, |g, ins| {
                let y = b.forward(g, ins[0]);
                project(g, y, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "plumbing",
            run: |seed| {
            let store = ParamStore::new();
            let x = random(&[2, 3, 4], seed, 1, true);
            let m = random(&[8], seed, 2, true);
            gradient_check(&store, &[x, m], EPS, |g, ins| {
                let f = g.channels_to_frames(ins[0]);
                let f = g.mask_rows(f, ins[1], &[false, true, false]);
                let a = g.slice_cols(f, 0, 3);
                let b = g.slice_cols(f, 3, 8);
                let c = g.concat_cols(&[b, a]);
                let n = g.l2_normalize_rows(c);
                let t = g.transpose(n);
                let s = g.matmul(n, t);
                let gc = g.gather_cols(s, vec![vec![1, 2], vec![2, 0], vec![0, 1]]);
                project(g, gc, seed)
            })
            .max_rel_error
            },
        },
        Case {
            name: "reductions",
            run: |seed| {
            let store = ParamStore::new();
            let x = random(&[4, 3], seed, 1, true);
            let y = random(&[4, 3], seed, 2, true);
            gradient_check(&store, &[x, y], EPS, |g, ins| {
                let p = g.mul(ins[0], ins[1]);
                let sr = g.sum_rows(p);
                let a = project(g, sr, seed);
                let m = g.mean(ins[0]);
                let out = g.add(a, m);
                g.scale(out, 0.5)
            })
            .max_rel_error
            },
        },
    ]
}

pub fn layer_case(name: &str) -> Case {
    layer_cases().into_iter().find(|c| c.name == name).expect("known case")
}

pub fn tiny_msm(variant: Variant) -> MsmConfig {
    MsmConfig {
        variant,
        n_mels: 12,
        channels: 2,
        d: 8,
        heads: 2,
        context_blocks: 1,
        bert_blocks: 1,
        ff_mult: 2,
        conv_kernel: Some(3),
        codebook: 4,
        code_dim: 6,
        proj_dim: 5,
        n_distractors: 3,
        hard_codes: false,
        ..MsmConfig::default()
    }
}

pub fn msm_features(frames: usize, seed: u64, salt: u64) -> Tensor {
    let mut rng = keyed(seed, Stream::Test, salt, 0);
    Tensor::new(&[frames, 12], (0..frames * 12).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn msm_track(t: usize, seed: u64, salt: u64) -> ConfidenceTrack {
    let mut rng = keyed(seed, Stream::Test, salt, 7);
    ConfidenceTrack::new((0..t).map(|_| rng.random_range(0.2f32..1.0)).collect())
}

pub fn msm_options(kind: StrategyKind, scale_mode: ScaleMode, seed: u64) -> StepOptions {
    StepOptions {
        strategy: MaskStrategy {
            kind,
            mask_fraction: 0.4,
            context: 2,
        },
        scale_mode,
        frame_participation: 1.0,
        seed,
        step: 3,
        total_steps: 10,
        exec: Execution::Sequential,
    }
}

/// Code targets the step would draw for utterance `key` at the base point.
fn base_targets(model: &MsmModel, feats: &Tensor, key: u64, opts: &StepOptions) -> Vec<usize> {
    let mut g = Graph::new(&model.store);
    let e = model.encode(&mut g, feats).unwrap();
    let tau = model.config.tau(opts.step, opts.total_steps);
    let mut rng = keyed(opts.seed, Stream::Gumbel, key, opts.step);
    model.quantize(&mut g, e, tau, &mut rng).unwrap().targets
}

/// Relative error of the analytic `l_scaled` gradient of a two-utterance
/// batch against the five-point stencil, for one seed. The w2v-BERT argmax
/// targets are held at their base values: a perturbation that flips a
/// near-tied argmax is a jump in the loss, not a gradient error.
pub fn msm_gradient_error(variant: Variant, kind: StrategyKind, mode: ScaleMode, seed: u64) -> f64 {
    let model = MsmModel::new(tiny_msm(variant), seed).unwrap();
    let feats = [msm_features(40, seed, 1), msm_features(36, seed, 2)];
    let tracks = [msm_track(10, seed, 1), msm_track(9, seed, 2)];
    let opts = msm_options(kind, mode, seed);
    let targets: Vec<Vec<usize>> = (0..2).map(|i| base_targets(&model, &feats[i], i as u64, &opts)).collect();
    let batch: Vec<BatchItem> = (0..2)
        .map(|i| BatchItem {
            key: i as u64,
            feats: &feats[i],
            track: Some(&tracks[i]),
            targets: Some(&targets[i]),
        })
        .collect();
    let (_, grads) = msm_step(&model, &batch, &opts).unwrap();
    finite_difference_error(&model.store, &grads, FD_STEP, |store| {
        let mut m = model.clone();
        m.store = store.clone();
        msm_forward(&m, &batch, &opts, false).unwrap().0.l_scaled
    })
}
