//! Log-scaled mel spectrograms.
//!
//! Frames of 50 ms every 25 ms are Hann-windowed, zero-padded to a 1024-point
//! FFT, reduced to power, passed through 128 HTK-style triangular mel filters
//! spanning 0 Hz to Nyquist, and mapped through `ln(energy + log_floor)`.
//! Triangles have unit peak height and are not area-normalized.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ingest::AudioClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            frame_ms: 50.0,
            hop_ms: 25.0,
            fft_size: 1024,
            n_mels: 128,
            sample_rate: 16_000,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn frame_len_samples(&self) -> usize {
        (self.frame_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let frame = self.frame_len_samples();
        if frame == 0 || self.hop_samples() == 0 {
            return Err(Error::Config("frame and hop must be at least one sample".into()));
        }
        if frame > self.fft_size {
            return Err(Error::Config(format!(
                "frame of {frame} samples does not fit a {}-point FFT",
                self.fft_size
            )));
        }
        if self.n_mels == 0 || !(self.f_max > self.f_min) || self.f_min < 0.0 {
            return Err(Error::Config("invalid mel band layout".into()));
        }
        if self.f_max > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config("f_max above Nyquist".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Symmetric Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Splits the clip into Hann-windowed frames zero-padded to `fft_size`.
/// Frame count is `⌊(N − frame_len)/hop⌋ + 1`.
pub fn frame_signal(clip: &AudioClip, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "clip at {} Hz, expected {} Hz",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let frame_len = cfg.frame_len_samples();
    let hop = cfg.hop_samples();
    if clip.samples.len() < frame_len {
        return Err(Error::SignalTooShort {
            samples: clip.samples.len(),
            needed: frame_len,
        });
    }
    let window = hann_window(frame_len);
    let count = (clip.samples.len() - frame_len) / hop + 1;
    Ok((0..count)
        .map(|f| {
            let mut frame = vec![0.0; cfg.fft_size];
            let src = &clip.samples[f * hop..f * hop + frame_len];
            for ((dst, &s), w) in frame.iter_mut().zip(src).zip(&window) {
                *dst = s as f64 * w;
            }
            frame
        })
        .collect())
}

/// Triangular mel filters over the `fft_size / 2 + 1` power-spectrum bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    /// Row-major `n_mels × n_bins`.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.fft_size / 2 + 1;
        let mel_lo = hz_to_mel(cfg.f_min);
        let mel_hi = hz_to_mel(cfg.f_max);
        let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        MelFilterbank {
            n_bins,
            weights,
            centers_hz: edges_hz[1..=cfg.n_mels].to_vec(),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.centers_hz.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.filter(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Reusable mel-spectrogram extractor holding the window, filterbank and FFT plan.
pub struct MelExtractor {
    cfg: MelConfig,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(MelExtractor {
            cfg: cfg.clone(),
            filterbank: MelFilterbank::new(cfg),
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// `frames × n_mels` matrix of natural-log mel energies.
    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let frames = frame_signal(clip, &self.cfg)?;
        let n_mels = self.cfg.n_mels;
        let n_bins = self.cfg.fft_size / 2 + 1;
        let mut data = Vec::with_capacity(frames.len() * n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut power = vec![0.0; n_bins];
        let mut mel = vec![0.0; n_mels];
        for frame in &frames {
            for (b, &s) in buf.iter_mut().zip(frame) {
                *b = Complex::new(s, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel);
            data.extend(mel.iter().map(|&e| (e + self.cfg.log_floor).ln() as f32));
        }
        FeatureMatrix::new(frames.len(), n_mels, data)
    }
}

pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<FeatureMatrix> {
    MelExtractor::new(cfg)?.compute(clip)
}
