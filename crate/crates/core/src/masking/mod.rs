//! Mask plans: how many blocks, where they start, and which frames they cover.
//!
//! Start indices are drawn one at a time by inverse CDF over weights
//! renormalised across the indices not yet chosen, so a plan never repeats a
//! start. Confidence-guided strategies weight index `t` by `s_t` (high),
//! `1 - s_t` (low), or split the blocks between the two (mixed).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    High,
    Low,
    Mixed,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [StrategyKind::Random, StrategyKind::High, StrategyKind::Low, StrategyKind::Mixed];

    pub fn needs_scores(self) -> bool {
        self != StrategyKind::Random
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::High => "high",
            StrategyKind::Low => "low",
            StrategyKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = AtmError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AtmError::Config(format!("unknown strategy `{s}` (random|high|low|mixed)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStrategy {
    pub kind: StrategyKind,
    pub mask_fraction: f64,
    pub context: usize,
}

impl MaskStrategy {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(AtmError::Config(format!("mask fraction {} outside (0, 1]", self.mask_fraction)));
        }
        if self.context == 0 {
            return Err(AtmError::Config("mask context must be at least one frame".into()));
        }
        Ok(())
    }
}

/// `K = max(1, round(p·T/c))`.
pub fn num_blocks(t: usize, p: f64, c: usize) -> Result<usize> {
    if t < c {
        return Err(AtmError::Length(format!("{t} frames is shorter than the mask context {c}")));
    }
    Ok(((p * t as f64 / c as f64).round() as usize).max(1))
}

/// One inverse-CDF draw over `weights`, skipping taken indices. Falls back to
/// uniform over the remaining indices when their total weight is zero.
fn draw<R: Rng + ?Sized>(weights: &[f64], taken: &[bool], rng: &mut R) -> usize {
    let total: f64 = weights.iter().zip(taken).filter(|(_, &t)| !t).map(|(w, _)| w).sum();
    let free = || (0..weights.len()).filter(|&i| !taken[i]);
    if total <= 0.0 || !total.is_finite() {
        log::warn!("all remaining mask-start weights are zero; sampling uniformly");
        let n = free().count();
        return free().nth(rng.random_range(0..n)).expect("a free index remains");
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for i in free() {
        if weights[i] <= 0.0 {
            continue;
        }
        acc += weights[i];
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` past the final bucket.
    last.expect("positive weight exists")
}

/// `k` distinct start indices in `0..t`.
pub fn sample_starts<R: Rng + ?Sized>(
    scores: Option<&[f32]>,
    t: usize,
    k: usize,
    kind: StrategyKind,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k > t {
        return Err(AtmError::Contract(format!("cannot draw {k} distinct starts from {t} frames")));
    }
    let scores = match (kind, scores) {
        (StrategyKind::Random, _) => None,
        (_, Some(s)) if s.len() == t => Some(s),
        (_, Some(s)) => {
            return Err(AtmError::Contract(format!("{} scores for {t} frames", s.len())));
        }
        (_, None) => return Err(AtmError::Contract(format!("strategy {kind} needs confidence scores"))),
    };
    let high: Vec<f64> = match scores {
        Some(s) => s.iter().map(|&v| v as f64).collect(),
        None => vec![1.0; t],
    };
    let low: Vec<f64> = high.iter().map(|v| 1.0 - v).collect();
    let n_first = match kind {
        StrategyKind::Mixed => k.div_ceil(2),
        _ => k,
    };
    let (first, second) = match kind {
        StrategyKind::Low => (&low, &low),
        StrategyKind::Mixed => (&high, &low),
        _ => (&high, &high),
    };

    let mut taken = vec![false; t];
    let mut starts = Vec::with_capacity(k);
    for n in 0..k {
        let w = if n < n_first { first } else { second };
        let i = draw(w, &taken, rng);
        taken[i] = true;
        starts.push(i);
    }
    Ok(starts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Start indices in draw order.
    pub starts: Vec<usize>,
    pub context: usize,
    pub len: usize,
    pub mask: Vec<bool>,
    /// Sorted masked indices `J`.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn empty(len: usize, context: usize) -> Self {
        expand_mask(&[], context, len)
    }

    pub fn full(len: usize) -> Self {
        expand_mask(&[0], len.max(1), len)
    }

    pub fn coverage(&self) -> f64 {
        self.masked.len() as f64 / self.len as f64
    }
}

/// Union of `[i, min(i + c, t))` over the starts.
pub fn expand_mask(starts: &[usize], c: usize, t: usize) -> MaskPlan {
    let mut mask = vec![false; t];
    for &i in starts {
        assert!(i < t, "mask start {i} out of range for {t} frames");
        for m in &mut mask[i..(i + c).min(t)] {
            *m = true;
        }
    }
    let masked = (0..t).filter(|&i| mask[i]).collect();
    MaskPlan {
        starts: starts.to_vec(),
        context: c,
        len: t,
        mask,
        masked,
    }
}

/// Number of blocks, start sampling and expansion in one call.
pub fn plan_mask<R: Rng + ?Sized>(
    strategy: &MaskStrategy,
    scores: Option<&[f32]>,
    t: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    let k = num_blocks(t, strategy.mask_fraction, strategy.context)?;
    let starts = sample_starts(scores, t, k, strategy.kind, rng)?;
    Ok(expand_mask(&starts, strategy.context, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub realized_coverage: f64,
    /// Mean of `s_t` over the masked frames (0 when nothing is masked).
    pub mean_masked_confidence: f64,
}

pub fn mask_stats(plan: &MaskPlan, scores: &[f32]) -> Result<MaskStats> {
    if scores.len() != plan.len {
        return Err(AtmError::Contract(format!("{} scores for a plan over {} frames", scores.len(), plan.len)));
    }
    let sum: f64 = plan.masked.iter().map(|&t| scores[t] as f64).sum();
    let n = plan.masked.len();
    Ok(MaskStats {
        realized_coverage: plan.coverage(),
        mean_masked_confidence: if n == 0 { 0.0 } else { sum / n as f64 },
    })
}
