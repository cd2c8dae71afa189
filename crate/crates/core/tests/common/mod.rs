//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod grad_cases;

use atm_core::masking::{sample_starts, StrategyKind};
use atm_core::rng::{keyed, Stream};
use atm_core::scorer::ctc::greedy_decode;
use atm_core::stats::{chi_square_gof, TestResult};
use rand::Rng;

/// Sum of path probabilities over every length-`t` path that collapses to
/// `target`, by enumerating all `classes^t` paths (blank is the last class).
pub fn ctc_brute_force(probs: &[f64], t: usize, classes: usize, target: &[usize]) -> f64 {
    let blank = classes - 1;
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..classes.pow(t as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % classes;
            c /= classes;
        }
        if greedy_decode(&path, blank) == target {
            total += path.iter().enumerate().map(|(i, &k)| probs[i * classes + k]).product::<f64>();
        }
    }
    total
}

/// Every label sequence over `0..vocab` of length `0..=max_len`.
pub fn all_targets(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<usize>> = frontier
            .iter()
            .flat_map(|p| {
                (0..vocab).map(move |v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Row-normalised random log posteriors `[t, classes]` in f64.
pub fn random_log_probs(t: usize, classes: usize, seed: u64) -> Vec<f64> {
    let mut rng = keyed(seed, Stream::Test, t as u64, classes as u64);
    let mut out = Vec::with_capacity(t * classes);
    for _ in 0..t {
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Probability of each unordered pair `{i, j}` (i < j) being the two starts
/// of a K = 2 weighted draw without replacement, by summing both orders.
pub fn pair_probabilities(w: &[f64]) -> Vec<((usize, usize), f64)> {
    let total: f64 = w.iter().sum();
    let mut out = Vec::new();
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            let ij = w[i] / total * w[j] / (total - w[i]);
            let ji = w[j] / total * w[i] / (total - w[j]);
            out.push(((i, j), ij + ji));
        }
    }
    out
}

/// Chi-square test of `draws` single-start samples from `scores` under the
/// high strategy against the normalised scores.
pub fn single_draw_test(scores: &[f32], draws: usize, seed: u64) -> TestResult {
    let mut counts = vec![0u64; scores.len()];
    for n in 0..draws {
        let mut rng = keyed(seed, Stream::Test, n as u64, 1);
        let s = sample_starts(Some(scores), scores.len(), 1, StrategyKind::High, &mut rng).unwrap();
        counts[s[0]] += 1;
    }
    let total: f64 = scores.iter().map(|&v| v as f64).sum();
    let probs: Vec<f64> = scores.iter().map(|&v| v as f64 / total).collect();
    chi_square_gof(&counts, &probs)
}

/// Chi-square test of K = 2 unordered-pair frequencies against enumeration.
pub fn joint_draw_test(scores: &[f32], draws: usize, seed: u64) -> TestResult {
    let w: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
    let oracle = pair_probabilities(&w);
    let mut counts = vec![0u64; oracle.len()];
    let mut rng = keyed(seed, Stream::Test, 2, 0);
    for _ in 0..draws {
        let s = sample_starts(Some(scores), scores.len(), 2, StrategyKind::High, &mut rng).unwrap();
        let key = (s[0].min(s[1]), s[0].max(s[1]));
        let slot = oracle.iter().position(|(k, _)| *k == key).unwrap();
        counts[slot] += 1;
    }
    let probs: Vec<f64> = oracle.iter().map(|(_, p)| *p).collect();
    chi_square_gof(&counts, &probs)
}

/// Smooth, clearly non-constant confidence track in `[0.05, 0.95]`.
pub fn wavy_scores(t: usize) -> Vec<f32> {
    (0..t)
        .map(|i| (0.5 + 0.45 * (i as f64 * 0.37).sin()) as f32)
        .collect()
}

/// Finite-difference check of `analytic` (one tensor per parameter)
/// against `eval`, which recomputes the scalar loss from a perturbed store.
/// The five-point stencil at `h` and `2h` is Richardson-extrapolated, so
/// `h` can be large enough to swamp f32 rounding in the loss without
/// truncation error taking over.
///
/// Returns the worst per-tensor relative error: the largest element
/// discrepancy divided by the largest analytic magnitude in that tensor,
/// floored at 1% of the largest analytic entry overall. Below that floor a
/// tensor's gradient is under the f32 resolution of the estimate.
pub fn finite_difference_error(
    store: &atm_core::nn::ParamStore,
    analytic: &[atm_core::nn::Tensor],
    h: f32,
    eval: impl Fn(&atm_core::nn::ParamStore) -> f64,
) -> f64 {
    let magnitude = |t: &atm_core::nn::Tensor| t.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    let floor = 1e-2 * analytic.iter().map(magnitude).fold(0.0, f64::max);
    let stencil = |f: &dyn Fn(f32) -> f64, step: f32| {
        (-f(2.0 * step) + 8.0 * f(step) - 8.0 * f(-step) + f(-2.0 * step)) / (12.0 * step as f64)
    };
    let work = std::cell::RefCell::new(store.clone());
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let a = analytic[id.0].data();
        let mut diff: f64 = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            let orig = store.get(id).data()[i];
            let at = |delta: f32| {
                work.borrow_mut().get_mut(id).data_mut()[i] = orig + delta;
                let loss = eval(&work.borrow());
                work.borrow_mut().get_mut(id).data_mut()[i] = orig;
                loss
            };
            let numeric = (16.0 * stencil(&at, h) - stencil(&at, 2.0 * h)) / 15.0;
            diff = diff.max((numeric - ai as f64).abs());
        }
        worst = worst.max(diff / magnitude(&analytic[id.0]).max(floor));
    }
    worst
}
