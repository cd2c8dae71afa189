//! One batch of masked speech modelling: per-utterance graphs built in
//! parallel, the batch-level diversity term, and an ordered gradient
//! reduction.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ScaleMode, Variant};
use super::losses::{ce_frames, contrastive_frames, diversity_from_sum, loss_weights, sample_candidates, weighted_sum};
use super::model::MsmModel;
use crate::error::{AtmError, Result};
use crate::masking::{mask_stats, plan_mask, MaskPlan, MaskStrategy};
use crate::nn::{reduce_gradients, Graph, NodeId, Tensor};
use crate::par::{self, Execution};
use crate::rng::{keyed, Stream};
use crate::scorer::ConfidenceTrack;

#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    /// Stable utterance key for the random streams (corpus index).
    pub key: u64,
    pub feats: &'a Tensor,
    pub track: Option<&'a ConfidenceTrack>,
    /// Code targets per encoded frame replacing the quantizer argmax. The
    /// targets are constants of the loss, so a finite-difference check
    /// around one point has to hold them fixed.
    pub targets: Option<&'a [usize]>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub strategy: MaskStrategy,
    pub scale_mode: ScaleMode,
    pub frame_participation: f64,
    pub seed: u64,
    /// 1-based step number; keys the random streams and the temperature.
    pub step: u64,
    pub total_steps: u64,
    pub exec: Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ctr: f64,
    pub l_div: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub l_scaled: f64,
    pub codebook_usage_pct: f64,
    pub msm_accuracy: f64,
    pub mean_masked_confidence: Option<f64>,
    pub realized_coverage: f64,
    pub tau: f64,
}

struct Forward<'p> {
    graph: Graph<'p>,
    /// Weighted per-frame objective (contrastive plus cross entropy).
    frame_obj: NodeId,
    scaled: f64,
    /// Column sums of noise-free code probabilities over the counted frames.
    prob_sum: NodeId,
    counted: usize,
    shared_weight: f64,
    ctr: f64,
    ce: f64,
    accuracy: f64,
    codes: Vec<usize>,
    plan: MaskPlan,
    masked_conf: Option<f64>,
}

fn mean_of(g: &Graph, x: NodeId) -> f64 {
    let v = g.value(x).data();
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

fn forward_one<'p>(model: &'p MsmModel, item: &BatchItem, opts: &StepOptions, tau: f64) -> Result<Forward<'p>> {
    let cfg = &model.config;
    let mut g = Graph::new(&model.store);
    let e = model.encode(&mut g, item.feats)?;
    let t = g.value(e).rows();

    let scores = item.track.map(|tr| tr.scores.as_slice());
    if let Some(s) = scores {
        if s.len() != t {
            return Err(AtmError::Contract(format!(
                "utterance {}: {} confidence scores for {t} encoded frames",
                item.key,
                s.len()
            )));
        }
    }
    let mut mask_rng = keyed(opts.seed, Stream::Mask, item.key, opts.step);
    let plan = plan_mask(&opts.strategy, scores, t, &mut mask_rng)?;
    let masked = plan.masked.clone();

    let e_masked = model.apply_mask(&mut g, e, &plan)?;
    let mut gumbel_rng = keyed(opts.seed, Stream::Gumbel, item.key, opts.step);
    let quant = model.quantize(&mut g, e, tau, &mut gumbel_rng)?;

    let probs = g.softmax(quant.logits);
    let counted_rows = if cfg.diversity_masked_only { g.select_rows(probs, &masked) } else { probs };
    let counted = g.value(counted_rows).rows();
    let prob_sum = g.sum_rows(counted_rows);

    let c = model.context(&mut g, e_masked);
    let c_j = g.select_rows(c, &masked);
    let q_j = g.select_rows(quant.q, &masked);
    let (cp, qp) = model.project(&mut g, c_j, q_j);
    let mut dist_rng = keyed(opts.seed, Stream::Distractor, item.key, opts.step);
    let candidates = sample_candidates(masked.len(), cfg.n_distractors, &mut dist_rng);
    let ctr = contrastive_frames(&mut g, cp, qp, &candidates, cfg.kappa);
    let ctr_mean = mean_of(&g, ctr.per_frame);

    let (per_frame, ce_node, ce_mean, accuracy) = match cfg.variant {
        Variant::W2v2 => (ctr.per_frame, None, 0.0, ctr.accuracy),
        Variant::W2vBert => {
            let logits = model.ce_logits(&mut g, c)?;
            let logits_j = g.select_rows(logits, &masked);
            let source = match item.targets {
                Some(fixed) if fixed.len() != t => {
                    return Err(AtmError::Contract(format!(
                        "utterance {}: {} fixed targets for {t} encoded frames",
                        item.key,
                        fixed.len()
                    )))
                }
                Some(fixed) => fixed,
                None => &quant.targets,
            };
            let targets: Vec<usize> = masked.iter().map(|&j| source[j]).collect();
            let ce = ce_frames(&mut g, logits_j, &targets);
            let ce_mean = mean_of(&g, ce.per_frame);
            (g.add(ctr.per_frame, ce.per_frame), Some(ce.per_frame), ce_mean, ce.accuracy)
        }
    };

    let selected = opts.scale_mode == ScaleMode::Frame && {
        let mut r = keyed(opts.seed, Stream::FrameSelect, item.key, opts.step);
        r.random::<f64>() < opts.frame_participation
    };
    let weights = loss_weights(opts.scale_mode, item.track, &masked, selected)?;
    let frame_obj = weighted_sum(&mut g, per_frame, &weights.frame)?;
    // Reported in f64 from the per-frame terms; the f32 scalar node would
    // round the loss to one ulp.
    let mut scaled = 0.0f64;
    for (j, &w) in weights.frame.iter().enumerate() {
        let ce_j = ce_node.map_or(0.0, |n| g.value(n).data()[j] as f64);
        scaled += w as f64 * (g.value(ctr.per_frame).data()[j] as f64 + ce_j);
    }
    if let Some((node, op)) = g.non_finite() {
        return Err(AtmError::NumericFailure { node, op });
    }
    let masked_conf = match scores {
        Some(s) => Some(mask_stats(&plan, s)?.mean_masked_confidence),
        None => None,
    };
    Ok(Forward {
        graph: g,
        frame_obj,
        scaled,
        prob_sum,
        counted,
        shared_weight: weights.shared,
        ctr: ctr_mean,
        ce: ce_mean,
        accuracy,
        codes: quant.targets,
        plan,
        masked_conf,
    })
}

/// Forward pass over a batch; gradients of `l_scaled` when `with_grads`.
pub fn msm_forward(
    model: &MsmModel,
    batch: &[BatchItem],
    opts: &StepOptions,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    if batch.is_empty() {
        return Err(AtmError::Data("empty MSM batch".into()));
    }
    let cfg = &model.config;
    let tau = cfg.tau(opts.step, opts.total_steps);
    let fwd = par::try_map_indexed(opts.exec, batch, |_, item| forward_one(model, item, opts, tau))?;

    let b = fwd.len() as f64;
    let l = cfg.codebook;
    let mut sum = vec![0.0f64; l];
    let mut count = 0;
    for f in &fwd {
        for (a, &v) in sum.iter_mut().zip(f.graph.value(f.prob_sum).data()) {
            *a += v as f64;
        }
        count += f.counted;
    }
    let (l_div, div_grad) = diversity_from_sum(&sum, count);
    let dw = cfg.diversity_weight;

    let mean = |x: fn(&Forward) -> f64| fwd.iter().map(x).sum::<f64>() / b;
    let l_ctr = mean(|f| f.ctr);
    let l_ce = mean(|f| f.ce);
    let frame_scaled = mean(|f| f.scaled);
    let shared_mean = mean(|f| f.shared_weight);
    let codes: BTreeSet<usize> = fwd.iter().flat_map(|f| f.codes.iter().copied()).collect();
    let masked_total: usize = fwd.iter().map(|f| f.plan.masked.len()).sum();
    let frames_total: usize = fwd.iter().map(|f| f.plan.len).sum();
    let mean_masked_confidence = if fwd.iter().all(|f| f.masked_conf.is_some()) {
        let weighted: f64 = fwd
            .iter()
            .map(|f| f.masked_conf.unwrap_or(0.0) * f.plan.masked.len() as f64)
            .sum();
        Some(weighted / masked_total as f64)
    } else {
        None
    };
    let breakdown = LossBreakdown {
        l_ctr,
        l_div,
        l_ce,
        l_total: l_ctr + l_ce + dw * l_div,
        l_scaled: frame_scaled + dw * l_div * shared_mean,
        codebook_usage_pct: 100.0 * codes.len() as f64 / l as f64,
        msm_accuracy: mean(|f| f.accuracy),
        mean_masked_confidence,
        realized_coverage: masked_total as f64 / frames_total as f64,
        tau,
    };
    if !with_grads {
        return Ok((breakdown, None));
    }

    let grads = par::try_map_indexed(opts.exec, &fwd, |_, f| {
        // Every utterance's sum feeds the same batch-level p̄, so each gets
        // the full gradient of the shared term.
        let div_seed: Vec<f32> = div_grad.iter().map(|g| (dw * shared_mean * g) as f32).collect();
        let seeds = [
            (f.frame_obj, Tensor::scalar((1.0 / b) as f32)),
            (f.prob_sum, Tensor::new(&[l], div_seed)?),
        ];
        Ok::<_, AtmError>(f.graph.backward_seeded(&seeds)?.into_params())
    })?;
    Ok((breakdown, Some(reduce_gradients(grads, 1.0))))
}

/// Loss breakdown and gradients of `l_scaled` for one batch.
pub fn msm_step(model: &MsmModel, batch: &[BatchItem], opts: &StepOptions) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let (breakdown, grads) = msm_forward(model, batch, opts, true)?;
    Ok((breakdown, grads.expect("gradients requested")))
}
