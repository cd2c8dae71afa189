//! Synthetic pseudo-speech: each label is a pair of sinusoids, segments of
//! 50-300 ms are concatenated and mixed with white noise at a
//! domain-specific SNR.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Utterance, SAMPLE_RATE};
use crate::error::{AtmError, Result};
use crate::par::{self, Execution};
use crate::rng::{keyed, Stream};

const MIN_SEGMENT: usize = 800;
const MAX_SEGMENT: usize = 4800;
const RAMP: usize = 80;
const TONE_AMPLITUDE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainConfig {
    pub name: String,
    pub snr_db: f64,
    pub freq_offset_hz: f64,
}

impl DomainConfig {
    pub fn clean() -> Self {
        DomainConfig {
            name: "clean".into(),
            snr_db: 30.0,
            freq_offset_hz: 0.0,
        }
    }

    pub fn shifted() -> Self {
        DomainConfig {
            name: "shifted".into(),
            snr_db: 5.0,
            freq_offset_hz: 120.0,
        }
    }
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self::clean()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub vocab: usize,
    pub count: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub seed: u64,
    pub domain: DomainConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab: 8,
            count: 200,
            min_duration_s: 1.0,
            max_duration_s: 2.0,
            seed: 0,
            domain: DomainConfig::clean(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(AtmError::Config(format!("vocab must be >= 2, got {}", self.vocab)));
        }
        if !(self.min_duration_s >= 0.05 && self.max_duration_s >= self.min_duration_s) {
            return Err(AtmError::Config(format!(
                "duration range [{}, {}] s is invalid (minimum 0.05 s)",
                self.min_duration_s, self.max_duration_s
            )));
        }
        Ok(())
    }

    /// The two nominal frequencies of label `v` before any domain offset.
    pub fn label_frequencies(&self, v: usize) -> (f64, f64) {
        let step = 3000.0 * v as f64 / self.vocab as f64;
        (250.0 + step, 3800.0 + step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

fn domain_key(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Lengths in `[MIN_SEGMENT, MAX_SEGMENT]` summing to `total`.
fn segment_lengths<R: Rng>(total: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    let mut remaining = total;
    while remaining > 0 {
        if remaining <= MAX_SEGMENT {
            out.push(remaining);
            break;
        }
        let mut len = rng.random_range(MIN_SEGMENT..=MAX_SEGMENT);
        if remaining - len < MIN_SEGMENT {
            len = remaining - MIN_SEGMENT;
        }
        out.push(len);
        remaining -= len;
    }
    out
}

/// Utterance `index` of the corpus together with its segment boundaries.
pub fn synth_utterance(cfg: &CorpusConfig, index: usize) -> Result<(Utterance, Vec<Segment>)> {
    cfg.validate()?;
    let mut rng = keyed(cfg.seed, Stream::Corpus, index as u64, domain_key(&cfg.domain.name));
    let sr = SAMPLE_RATE as f64;
    let lo = (cfg.min_duration_s * sr).round() as usize;
    let hi = (cfg.max_duration_s * sr).round() as usize;
    let total = if lo == hi { lo } else { rng.random_range(lo..=hi) };

    let mut samples = vec![0f32; total];
    let mut segments = Vec::new();
    let mut start = 0;
    let mut prev = None;
    for len in segment_lengths(total, &mut rng) {
        let label = loop {
            let v = rng.random_range(0..cfg.vocab);
            if Some(v) != prev {
                break v;
            }
        };
        prev = Some(label);
        let (f1, f2) = cfg.label_frequencies(label);
        let off = cfg.domain.freq_offset_hz;
        let phases: [f64; 2] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        for (i, s) in samples[start..start + len].iter_mut().enumerate() {
            let t = i as f64 / sr;
            let tau = std::f64::consts::TAU;
            let tone = ((f1 + off) * t + phases[0]) * tau;
            let tone2 = ((f2 + off) * t + phases[1]) * tau;
            let ramp = (i.min(len - 1 - i) as f64 / RAMP as f64).min(1.0);
            *s = (TONE_AMPLITUDE * ramp * (tone.sin() + tone2.sin())) as f32;
        }
        segments.push(Segment {
            label,
            start,
            end: start + len,
        });
        start += len;
    }

    // Two tones of amplitude a carry power a^2.
    let signal_power = TONE_AMPLITUDE * TONE_AMPLITUDE;
    let sigma = (signal_power / 10f64.powf(cfg.domain.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).map_err(|e| AtmError::Config(e.to_string()))?;
    for s in samples.iter_mut() {
        *s = (*s as f64 + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32;
    }

    let labels = segments.iter().map(|s| s.label).collect();
    let id = format!("{}-{:05}", cfg.domain.name, index);
    Ok((Utterance::new(id, samples, cfg.domain.name.clone()).with_labels(labels), segments))
}

pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    synth_corpus_with(cfg, Execution::default())
}

pub fn synth_corpus_with(cfg: &CorpusConfig, exec: Execution) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    par::map_range(exec, cfg.count, |i| synth_utterance(cfg, i).map(|(u, _)| u))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex64;
    use rustfft::FftPlanner;

    fn cfg(vocab: usize, count: usize, seed: u64) -> CorpusConfig {
        CorpusConfig {
            vocab,
            count,
            seed,
            ..CorpusConfig::default()
        }
    }

    fn spectrum(x: &[f32]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf[..n / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    #[test]
    fn deterministic_given_seed() {
        let c = cfg(2, 1, 7);
        let a = synth_corpus(&c).unwrap();
        let b = synth_corpus(&c).unwrap();
        assert_eq!(a.len(), 1);
        let bits = |u: &Utterance| u.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0]), bits(&b[0]));
        let other = synth_corpus(&cfg(2, 1, 8)).unwrap();
        assert_ne!(bits(&a[0]), bits(&other[0]));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let c = cfg(4, 6, 3);
        assert_eq!(
            synth_corpus_with(&c, Execution::Sequential).unwrap(),
            synth_corpus_with(&c, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn vocab_below_two_is_rejected() {
        assert!(matches!(synth_corpus(&cfg(1, 1, 0)), Err(AtmError::Config(_))));
    }

    #[test]
    fn fixed_duration_gives_exact_length() {
        let c = CorpusConfig {
            min_duration_s: 1.0,
            max_duration_s: 1.0,
            ..cfg(8, 5, 1)
        };
        for u in synth_corpus(&c).unwrap() {
            assert_eq!(u.samples.len(), 16000);
        }
    }

    #[test]
    fn segments_respect_bounds_and_alternate() {
        let c = CorpusConfig {
            max_duration_s: 4.0,
            ..cfg(3, 20, 11)
        };
        for i in 0..c.count {
            let (u, segs) = synth_utterance(&c, i).unwrap();
            assert_eq!(segs.last().unwrap().end, u.samples.len());
            for w in segs.windows(2) {
                assert_eq!(w[0].end, w[1].start);
                assert_ne!(w[0].label, w[1].label);
            }
            for s in &segs {
                let len = s.end - s.start;
                assert!((MIN_SEGMENT..=MAX_SEGMENT).contains(&len), "{len}");
            }
            assert!(u.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
            u.validate(3).unwrap();
        }
    }

    #[test]
    fn clean_segment_peaks_at_label_frequencies() {
        let c = cfg(8, 10, 5);
        let mut checked = 0;
        for i in 0..c.count {
            let (u, segs) = synth_utterance(&c, i).unwrap();
            for s in segs.iter().filter(|s| s.end - s.start >= 1600) {
                // 10 Hz bins; the two tones sit either side of 3700 Hz.
                let spec = spectrum(&u.samples[s.start..s.start + 1600]);
                let split = 370;
                let peak = |r: std::ops::Range<usize>| r.max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap();
                let (f1, f2) = c.label_frequencies(s.label);
                let lo = peak(1..split) as f64 * 10.0;
                let hi = peak(split..spec.len()) as f64 * 10.0;
                assert!((lo - f1).abs() <= 10.0, "segment {s:?}: {lo} vs {f1}");
                assert!((hi - f2).abs() <= 10.0, "segment {s:?}: {hi} vs {f2}");
                // Both tones dominate everything else in the spectrum.
                let floor = spec.iter().cloned().fold(0.0, f64::max) * 0.05;
                assert!(spec[(lo / 10.0) as usize] > floor && spec[(hi / 10.0) as usize] > floor);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn nearest_frequency_classifier_recovers_labels() {
        let c = cfg(8, 40, 2);
        let (mut right, mut total) = (0, 0);
        for i in 0..c.count {
            let (u, segs) = synth_utterance(&c, i).unwrap();
            for s in &segs {
                let spec = spectrum(&u.samples[s.start..s.end]);
                let hz_per_bin = 16000.0 / (s.end - s.start) as f64;
                let peak = (1..spec.len())
                    .filter(|&b| (b as f64 * hz_per_bin) < 3700.0)
                    .max_by(|&a, &b| spec[a].total_cmp(&spec[b]))
                    .unwrap();
                let f = peak as f64 * hz_per_bin;
                let guess = (0..c.vocab)
                    .min_by(|&a, &b| {
                        let da = (c.label_frequencies(a).0 - f).abs();
                        let db = (c.label_frequencies(b).0 - f).abs();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                right += (guess == s.label) as usize;
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 > 0.95, "{right}/{total}");
    }
}
