//! Connectionist temporal classification in log space.

use crate::error::{AtmError, Result};

pub struct CtcOutput {
    /// `-ln P(target | inputs)`
    pub loss: f64,
    /// Posterior label occupancy `γ[t, k]`, row-major `[t, classes]`.
    pub occupancy: Vec<f64>,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Minimum number of frames that can emit `target` (repeats need a blank).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward-backward over the blank-expanded label sequence.
///
/// `log_probs` is row-major `[frames, classes]` of per-frame log posteriors.
pub fn forward_backward(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    blank: usize,
    target: &[usize],
) -> Result<CtcOutput> {
    assert_eq!(log_probs.len(), frames * classes);
    if let Some(&bad) = target.iter().find(|&&l| l >= classes || l == blank) {
        return Err(AtmError::Contract(format!(
            "target label {bad} outside 0..{classes} or equal to blank"
        )));
    }
    let required = min_frames(target).max(1);
    if frames < required {
        return Err(AtmError::InfeasibleAlignment { frames, required });
    }

    let states: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = states.len();
    let lp = |t: usize, s: usize| log_probs[t * classes + states[s]];
    let skip_ok = |s: usize| s >= 2 && states[s] != blank && states[s] != states[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if skip_ok(s) { prev[s - 2] } else { ninf };
            let v = lse3(a, b, c);
            alpha[t * s_len + s] = if v == ninf { ninf } else { v + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, s_len - 1);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, s_len - 2);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { ninf };
            let c = if s + 2 < s_len && skip_ok(s + 2) { next[s + 2] } else { ninf };
            let v = lse3(a, b, c);
            beta[t * s_len + s] = if v == ninf { ninf } else { v + lp(t, s) };
        }
    }

    let tail = &alpha[last * s_len..];
    let log_p = if s_len > 1 {
        lse2(tail[s_len - 1], tail[s_len - 2])
    } else {
        tail[0]
    };
    if !log_p.is_finite() {
        return Err(AtmError::NumericFailure { node: 0, op: "ctc" });
    }

    let mut occupancy = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, s) - log_p;
            if v > ninf {
                occupancy[t * classes + states[s]] += v.exp();
            }
        }
    }
    Ok(CtcOutput {
        loss: -log_p,
        occupancy,
    })
}

/// CTC negative log-likelihood from log posteriors.
pub fn ctc_loss(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    blank: usize,
    target: &[usize],
) -> Result<f64> {
    forward_backward(log_probs, frames, classes, blank, target).map(|o| o.loss)
}

/// Best-path decode: argmax per frame, merge repeats, drop blanks.
pub fn greedy_decode(argmax_per_frame: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in argmax_per_frame {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn logs(rows: &[&[f64]]) -> Vec<f64> {
        rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect()
    }

    #[test]
    fn single_frame_single_label() {
        // classes: a=0, b=1, blank=2
        let lp = logs(&[&[0.6, 0.1, 0.3]]);
        let loss = ctc_loss(&lp, 1, 3, 2, &[0]).unwrap();
        assert_abs_diff_eq!(loss, -(0.6f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.5108, epsilon = 1e-4);
    }

    #[test]
    fn two_uniform_frames_three_paths() {
        let third = 1.0 / 3.0;
        let lp = logs(&[&[third; 3], &[third; 3]]);
        let loss = ctc_loss(&lp, 2, 3, 2, &[0]).unwrap();
        assert_abs_diff_eq!(loss, 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn infeasible_alignment_is_an_error() {
        let lp = logs(&[&[0.3, 0.3, 0.4], &[0.3, 0.3, 0.4]]);
        assert!(matches!(
            ctc_loss(&lp, 2, 3, 2, &[0, 0]),
            Err(AtmError::InfeasibleAlignment { frames: 2, required: 3 })
        ));
        assert!(ctc_loss(&lp, 2, 3, 2, &[0, 1, 0]).is_err());
    }

    #[test]
    fn occupancy_rows_sum_to_one() {
        let lp = logs(&[
            &[0.2, 0.5, 0.3],
            &[0.6, 0.1, 0.3],
            &[0.1, 0.7, 0.2],
            &[0.3, 0.3, 0.4],
        ]);
        let out = forward_backward(&lp, 4, 3, 2, &[0, 1]).unwrap();
        for row in out.occupancy.chunks(3) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn greedy_merges_and_drops_blank() {
        assert_eq!(greedy_decode(&[2, 0, 0, 2, 0, 1, 1, 2], 2), vec![0, 0, 1]);
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[1, 3]), 2);
        assert_eq!(edit_distance(&[4, 5], &[1, 3]), 2);
    }
}
