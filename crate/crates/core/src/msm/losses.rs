//! Loss terms of masked speech modelling and the confidence-based scaling.

use rand::seq::index::sample;
use rand::Rng;

use super::config::ScaleMode;
use crate::error::{AtmError, Result};
use crate::nn::{Graph, NodeId, Tensor};
use crate::scorer::ConfidenceTrack;

/// `(L - exp(H(p̄))) / L` with natural-log entropy.
pub fn diversity_loss(p_bar: &[f64]) -> f64 {
    let l = p_bar.len() as f64;
    (l - entropy(p_bar).exp()) / l
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Diversity loss of `p̄ = sum / count` and its gradient with respect to the
/// unnormalised probability sum.
pub fn diversity_from_sum(sum: &[f64], count: usize) -> (f64, Vec<f64>) {
    let n = count as f64;
    let l = sum.len() as f64;
    let p: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let perplexity = entropy(&p).exp();
    // d/dp_l [(L - e^H)/L] = e^H (ln p_l + 1) / L
    let grad = p
        .iter()
        .map(|&v| perplexity * (v.max(f64::MIN_POSITIVE).ln() + 1.0) / l / n)
        .collect();
    ((l - perplexity) / l, grad)
}

/// Candidate lists for InfoNCE over `m` masked positions: column 0 is the
/// position itself, followed by `n` distinct other positions. `n` is clamped
/// to `m - 1`.
pub fn sample_candidates<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let n_eff = n.min(m.saturating_sub(1));
    if n_eff < n {
        log::debug!("only {m} masked frames; using {n_eff} distractors instead of {n}");
    }
    (0..m)
        .map(|j| {
            let mut row = Vec::with_capacity(n_eff + 1);
            row.push(j);
            // Draw from the m - 1 other positions and skip over j.
            row.extend(sample(rng, m - 1, n_eff).into_iter().map(|i| if i >= j { i + 1 } else { i }));
            row
        })
        .collect()
}

pub struct FrameLosses {
    /// Per-masked-frame loss, `[m]`.
    pub per_frame: NodeId,
    /// Fraction of frames whose prediction is right.
    pub accuracy: f64,
}

/// Per-frame InfoNCE over cosine similarities scaled by `1/kappa`.
/// `c` and `q` are `[m, k]` rows aligned with the masked positions.
pub fn contrastive_frames(g: &mut Graph, c: NodeId, q: NodeId, candidates: &[Vec<usize>], kappa: f64) -> FrameLosses {
    let cn = g.l2_normalize_rows(c);
    let qn = g.l2_normalize_rows(q);
    let sim = g.matmul_nt(cn, qn);
    let sim = g.scale(sim, (1.0 / kappa) as f32);
    let logits = g.gather_cols(sim, candidates.to_vec());
    let correct = g
        .value(logits)
        .argmax_rows()
        .iter()
        .filter(|&&k| k == 0)
        .count();
    let lp = g.log_softmax(logits);
    let true_lp = g.pick(lp, &vec![0; candidates.len()]);
    FrameLosses {
        per_frame: g.scale(true_lp, -1.0),
        accuracy: correct as f64 / candidates.len().max(1) as f64,
    }
}

/// Mean-reduced contrastive loss.
pub fn contrastive_loss(g: &mut Graph, c: NodeId, q: NodeId, candidates: &[Vec<usize>], kappa: f64) -> NodeId {
    let f = contrastive_frames(g, c, q, candidates, kappa);
    g.mean(f.per_frame)
}

/// Per-frame cross entropy of `logits` `[m, L]` against `targets`.
pub fn ce_frames(g: &mut Graph, logits: NodeId, targets: &[usize]) -> FrameLosses {
    let correct = g
        .value(logits)
        .argmax_rows()
        .iter()
        .zip(targets)
        .filter(|(a, b)| a == b)
        .count();
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, targets);
    FrameLosses {
        per_frame: g.scale(picked, -1.0),
        accuracy: correct as f64 / targets.len().max(1) as f64,
    }
}

/// Multipliers applied to one utterance's losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// One weight per masked frame on the frame-decomposable terms,
    /// including the `1/|J|` of the mean.
    pub frame: Vec<f32>,
    /// Multiplier on the utterance's share of the diversity term.
    pub shared: f64,
}

/// Weights for `mode`. `selected` marks utterances drawn for frame-level
/// scaling; it is ignored by the other modes.
pub fn loss_weights(
    mode: ScaleMode,
    track: Option<&ConfidenceTrack>,
    masked: &[usize],
    selected: bool,
) -> Result<LossWeights> {
    let m = masked.len() as f64;
    let need = || track.ok_or_else(|| AtmError::Contract(format!("scale mode {mode} needs confidence scores")));
    Ok(match mode {
        ScaleMode::None => LossWeights {
            frame: vec![(1.0 / m) as f32; masked.len()],
            shared: 1.0,
        },
        ScaleMode::Utterance => {
            let s = need()?.utterance_mean;
            LossWeights {
                frame: vec![(s / m) as f32; masked.len()],
                shared: s,
            }
        }
        ScaleMode::Frame if selected => {
            let tr = need()?;
            LossWeights {
                frame: masked.iter().map(|&t| (tr.scores[t] as f64 / m) as f32).collect(),
                shared: 1.0,
            }
        }
        ScaleMode::Frame => LossWeights {
            frame: vec![(1.0 / m) as f32; masked.len()],
            shared: 1.0,
        },
    })
}

/// Scaled objective of one utterance from its per-frame losses and its
/// (unweighted) share of the batch-level term.
pub fn scale_loss(per_frame: &[f64], shared: f64, weights: &LossWeights) -> f64 {
    per_frame
        .iter()
        .zip(&weights.frame)
        .map(|(l, &w)| l * w as f64)
        .sum::<f64>()
        + shared * weights.shared
}

/// `sum_j w_j · x_j` as a graph node.
pub fn weighted_sum(g: &mut Graph, x: NodeId, weights: &[f32]) -> Result<NodeId> {
    let w = Tensor::new(&[weights.len()], weights.to_vec())?;
    let y = g.mul_const(x, w);
    Ok(g.sum(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed, Stream};

    #[test]
    fn diversity_extremes_and_half() {
        assert!(diversity_loss(&[0.25; 4]).abs() < 1e-12);
        assert!((diversity_loss(&[1.0, 0.0, 0.0, 0.0]) - 0.75).abs() < 1e-12);
        assert!((diversity_loss(&[0.5, 0.5, 0.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn diversity_gradient_matches_differences() {
        let sum = [1.3, 0.2, 2.1, 0.4];
        let (_, grad) = diversity_from_sum(&sum, 4);
        for i in 0..4 {
            let h = 1e-6;
            let mut a = sum;
            let mut b = sum;
            a[i] += h;
            b[i] -= h;
            // p̄ is taken relative to a fixed count, as in the batch reduction.
            let fd = (diversity_from_sum(&a, 4).0 - diversity_from_sum(&b, 4).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad[i]);
        }
    }

    fn rows(v: &[Vec<f32>]) -> Tensor {
        Tensor::from_rows(v).unwrap()
    }

    #[test]
    fn contrastive_closed_forms() {
        // c_j = q_j, two orthogonal distractors.
        let eye = rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let mut g = Graph::detached();
        let c = g.constant(eye.clone());
        let q = g.constant(eye);
        let loss = contrastive_loss(&mut g, c, q, &[vec![0, 1, 2], vec![1, 0, 2], vec![2, 0, 1]], 0.1);
        let expected = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((g.value(loss).item() as f64 - expected).abs() < 1e-6);

        // c_j orthogonal to q_j, one distractor equal to c_j.
        let mut g = Graph::detached();
        let c = g.constant(rows(&[vec![1.0, 0.0]]));
        let q = g.constant(rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let loss = contrastive_loss(&mut g, c, q, &[vec![0, 1]], 0.1);
        let expected = (1.0 + 10f64.exp()).ln();
        assert!((g.value(loss).item() as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn zero_distractors_give_zero() {
        let mut rng = keyed(0, Stream::Test, 0, 0);
        let cands = sample_candidates(5, 0, &mut rng);
        let mut g = Graph::detached();
        let c = g.constant(Tensor::full(&[5, 3], 0.3));
        let q = g.constant(Tensor::full(&[5, 3], -0.7));
        let loss = contrastive_loss(&mut g, c, q, &cands, 0.1);
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn candidates_exclude_self_and_clamp() {
        let mut rng = keyed(1, Stream::Test, 0, 0);
        for row in sample_candidates(6, 3, &mut rng).iter().enumerate() {
            let (j, r) = row;
            assert_eq!(r[0], j);
            assert_eq!(r.len(), 4);
            assert!(r[1..].iter().all(|&i| i != j && i < 6));
            let mut s = r.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 4);
        }
        assert!(sample_candidates(3, 10, &mut rng).iter().all(|r| r.len() == 3));
        assert!(sample_candidates(1, 10, &mut rng).iter().all(|r| r.len() == 1));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::detached();
        let logits = g.constant(Tensor::zeros(&[3, 4]));
        let f = ce_frames(&mut g, logits, &[0, 1, 3]);
        let m = g.mean(f.per_frame);
        assert!((g.value(m).item() as f64 - 4f64.ln()).abs() < 1e-6);

        let mut g = Graph::detached();
        let logits = g.constant(rows(&[vec![0.9f32.ln(), 0.1f32.ln()]]));
        let f = ce_frames(&mut g, logits, &[0]);
        assert!((g.value(f.per_frame).data()[0] as f64 + 0.9f64.ln()).abs() < 1e-6);
        assert_eq!(f.accuracy, 1.0);

        let mut g = Graph::detached();
        let logits = g.constant(rows(&[vec![30.0, 0.0], vec![0.0, 30.0]]));
        let f = ce_frames(&mut g, logits, &[0, 1]);
        assert!(g.value(f.per_frame).data().iter().all(|&v| v < 1e-6));
        assert_eq!(f.accuracy, 1.0);
    }

    #[test]
    fn scaling_examples() {
        let masked = [2usize, 3];
        let per_frame = [1.5, 2.5];
        let track = ConfidenceTrack {
            scores: vec![0.5; 5],
            utterance_mean: 0.5,
        };
        let none = loss_weights(ScaleMode::None, None, &masked, false).unwrap();
        let l_total = scale_loss(&per_frame, 0.0, &none);
        assert_eq!(l_total, 2.0);
        let utt = loss_weights(ScaleMode::Utterance, Some(&track), &masked, false).unwrap();
        assert_eq!(scale_loss(&per_frame, 0.0, &utt), 1.0);
        let off = loss_weights(ScaleMode::Frame, Some(&track), &masked, false).unwrap();
        assert_eq!(off, none);
        let on = loss_weights(ScaleMode::Frame, Some(&track), &masked, true).unwrap();
        assert_eq!(scale_loss(&per_frame, 0.0, &on), 0.5 * l_total);
        assert!(loss_weights(ScaleMode::Utterance, None, &masked, false).is_err());
    }
}
