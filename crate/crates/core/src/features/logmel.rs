//! 80-bin log-Mel filterbank frontend (25 ms Hann window, 10 ms hop,
//! 512-point DFT, triangular HTK-mel filters over 125-7600 Hz).

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{AtmError, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Per-utterance mean/variance normalisation of each mel bin.
    pub normalize: bool,
    /// Keep at most this many leading frames; `None` keeps everything.
    pub max_crop_frames: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 80,
            n_fft: 512,
            win_length: 400,
            hop_length: 160,
            f_min: 125.0,
            f_max: 7600.0,
            log_floor: 1e-10,
            normalize: true,
            max_crop_frames: None,
        }
    }
}

/// `T' x n_mels` matrix of log-Mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

pub fn num_frames(samples: usize, win: usize, hop: usize) -> usize {
    if samples < win {
        0
    } else {
        1 + (samples - win) / hop
    }
}

/// Triangular filters on the DFT bin grid.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Centre frequency of each filter in Hz.
    pub centers: Vec<f64>,
    /// `n_mels x (n_fft/2 + 1)` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, f_min: f64, f_max: f64) -> Self {
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate / n_fft as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        MelFilterbank {
            centers: edges[1..=n_mels].to_vec(),
            weights,
        }
    }
}

pub struct LogMel {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl LogMel {
    pub fn new(cfg: FeatureConfig) -> Self {
        let n = cfg.win_length;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, 16000.0, cfg.f_min, cfg.f_max);
        LogMel { cfg, window, fft, bank }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Raw log-Mel energies (no normalisation, no cropping).
    pub fn compute(&self, samples: &[f32]) -> Result<FeatureSequence> {
        let cfg = &self.cfg;
        if samples.len() < cfg.win_length {
            return Err(AtmError::Length(format!(
                "{} samples, need at least {} for one window",
                samples.len(),
                cfg.win_length
            )));
        }
        let frames = num_frames(samples.len(), cfg.win_length, cfg.hop_length);
        let n_bins = cfg.n_fft / 2 + 1;
        let floor_log = cfg.log_floor.ln();
        let mut out = Vec::with_capacity(frames * cfg.n_mels);
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0f64; n_bins];
        for t in 0..frames {
            let start = t * cfg.hop_length;
            buf.fill(Complex64::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = samples[start + i] as f64 * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.bank.weights {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                let v = if e > cfg.log_floor { e.ln() } else { floor_log };
                out.push(v as f32);
            }
        }
        Ok(FeatureSequence {
            frames: Tensor::new(&[frames, cfg.n_mels], out)?,
        })
    }

    /// Frontend as used for training: log-Mel, optional crop, optional
    /// per-utterance normalisation.
    pub fn featurize(&self, utt: &Utterance) -> Result<FeatureSequence> {
        let mut feats = self.compute(&utt.samples)?;
        if let Some(max) = self.cfg.max_crop_frames {
            let keep = feats.num_frames().min(max);
            let d = feats.dim();
            let data = feats.frames.data()[..keep * d].to_vec();
            feats.frames = Tensor::new(&[keep, d], data)?;
        }
        if self.cfg.normalize {
            normalize_in_place(&mut feats.frames);
        }
        Ok(feats)
    }
}

pub fn logmel(utt: &Utterance) -> Result<FeatureSequence> {
    LogMel::new(FeatureConfig::default()).compute(&utt.samples)
}

/// Zero-mean, unit-variance per column.
pub fn normalize_in_place(x: &mut Tensor) {
    let (t, d) = (x.rows(), x.cols());
    for j in 0..d {
        let mean = (0..t).map(|i| x.data()[i * d + j] as f64).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x.data()[i * d + j] as f64 - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for i in 0..t {
            let v = &mut x.data_mut()[i * d + j];
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
            .collect()
    }

    #[test]
    fn frame_count_for_one_second() {
        let lm = LogMel::new(FeatureConfig::default());
        let f = lm.compute(&vec![0.0; 16000]).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 80);
        assert_eq!(f.num_frames(), 1 + (16000 - 400) / 160);
    }

    #[test]
    fn silence_hits_the_floor_everywhere() {
        let lm = LogMel::new(FeatureConfig::default());
        let f = lm.compute(&vec![0.0; 1000]).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(f.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_is_a_length_error() {
        let lm = LogMel::new(FeatureConfig::default());
        assert!(matches!(lm.compute(&[0.0; 399]), Err(AtmError::Length(_))));
        assert!(lm.compute(&[0.0; 400]).is_ok());
    }

    #[test]
    fn one_khz_tone_peaks_at_nearest_center() {
        let lm = LogMel::new(FeatureConfig::default());
        // Oracle: nearest filter centre evaluated directly from the mel edges.
        let (lo, hi) = (hz_to_mel(125.0), hz_to_mel(7600.0));
        let expected = (0..80)
            .map(|m| (m, mel_to_hz(lo + (hi - lo) * (m + 1) as f64 / 81.0)))
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let f = lm.compute(&tone(1000.0, 0.5, 16000)).unwrap();
        for t in 0..f.num_frames() {
            assert_eq!(crate::nn::tensor::argmax(f.frames.row(t)), expected, "frame {t}");
        }
    }

    #[test]
    fn one_hop_shift_shifts_one_frame() {
        let lm = LogMel::new(FeatureConfig::default());
        let mut x: Vec<f32> = tone(437.0, 0.3, 6000);
        for (i, v) in x.iter_mut().enumerate() {
            *v += ((i * 7919 % 101) as f32 / 101.0 - 0.5) * 0.05;
        }
        let a = lm.compute(&x).unwrap();
        let b = lm.compute(&x[160..]).unwrap();
        assert_eq!(a.num_frames(), b.num_frames() + 1);
        for t in 0..b.num_frames() {
            for (u, v) in a.frames.row(t + 1).iter().zip(b.frames.row(t)) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn doubling_amplitude_adds_two_log_two() {
        let lm = LogMel::new(FeatureConfig::default());
        let x = tone(1500.0, 0.2, 4000);
        let x2: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        let (a, b) = (lm.compute(&x).unwrap(), lm.compute(&x2).unwrap());
        let floor = (1e-10f64).ln() as f32;
        let step = 2.0 * std::f32::consts::LN_2;
        let mut checked = 0;
        for (u, v) in a.frames.data().iter().zip(b.frames.data()) {
            if *u > floor && *v > floor {
                assert!((v - u - step).abs() < 1e-5, "{u} -> {v}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn normalisation_zero_mean_unit_var() {
        let mut x = Tensor::new(&[4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 7.0, 4.0, 7.0]).unwrap();
        normalize_in_place(&mut x);
        for j in 0..2 {
            let col: Vec<f32> = (0..4).map(|i| x.data()[i * 2 + j]).collect();
            let mean: f32 = col.iter().sum::<f32>() / 4.0;
            let var: f32 = col.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
