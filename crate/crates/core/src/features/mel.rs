use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Number of mel bands the encoder consumes.
pub const N_MELS: usize = 128;

/// STFT front-end settings. The defaults are a 25 ms Hann window and a
/// 10 ms hop at 16 kHz with a 512-point FFT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16000,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.win_length == 0 || self.hop_length == 0 {
            return Err(Error::Config("sample rate, window and hop must be positive".into()));
        }
        if self.n_fft < self.win_length {
            return Err(Error::Config(format!(
                "n_fft {} is smaller than the window {}",
                self.n_fft, self.win_length
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    /// `1 + ⌊(len − win) / hop⌋`, or `None` when the clip is shorter than
    /// one window.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        (samples >= self.win_length).then(|| 1 + (samples - self.win_length) / self.hop_length)
    }
}

/// `128 × N` log-mel energies, stored band-major (`[band][frame]`).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: usize,
    data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || data.len() != N_MELS * frames {
            return Err(Error::Shape(format!(
                "mel spectrogram needs {N_MELS}×{frames} values, got {}",
                data.len()
            )));
        }
        Ok(MelSpectrogram { frames, data })
    }

    pub fn bands(&self) -> usize {
        N_MELS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, band: usize, frame: usize) -> f64 {
        self.data[band * self.frames + frame]
    }

    /// Keeps frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Shape(format!(
                "frames [{start}, {}) out of range for {} frames",
                start + len,
                self.frames
            )));
        }
        let data = self
            .data
            .chunks(self.frames)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Self::new(len, data)
    }

    /// Single-channel image `[1, 128, N]` for the encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, N_MELS, self.frames], self.data.clone())
            .expect("spectrogram shape is checked at construction")
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters spanning 0 Hz to Nyquist.
///
/// Each FFT bin covers `[f_k − Δ/2, f_k + Δ/2]`; a filter's weight on the bin
/// is the mean of its triangle over that interval. Narrow low-frequency
/// filters that fall between bin centres therefore still see energy.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_bins: usize,
    edges_hz: Vec<f64>,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let n_bins = n_fft / 2 + 1;
        let bin_width = sample_rate as f64 / n_fft as f64;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let mut weights = vec![0.0; N_MELS * n_bins];
        for m in 0..N_MELS {
            let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let centre = k as f64 * bin_width;
                let a = (centre - bin_width / 2.0).max(0.0);
                let b = (centre + bin_width / 2.0).min(nyquist);
                weights[m * n_bins + k] = triangle_integral(lo, mid, hi, a, b) / bin_width;
            }
        }
        MelFilterbank {
            n_bins,
            edges_hz,
            weights,
        }
    }

    pub fn centre_hz(&self, band: usize) -> f64 {
        self.edges_hz[band + 1]
    }

    pub fn weights(&self, band: usize) -> &[f64] {
        &self.weights[band * self.n_bins..(band + 1) * self.n_bins]
    }
}

/// `∫_a^b tri(f) df` for the unit-peak triangle on `[lo, hi]` peaking at `mid`.
fn triangle_integral(lo: f64, mid: f64, hi: f64, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    let (x1, x2) = (a.max(lo), b.min(mid));
    if x2 > x1 {
        total += ((x2 - lo).powi(2) - (x1 - lo).powi(2)) / (2.0 * (mid - lo));
    }
    let (x1, x2) = (a.max(mid), b.min(hi));
    if x2 > x1 {
        total += ((hi - x1).powi(2) - (hi - x2).powi(2)) / (2.0 * (hi - mid));
    }
    total
}

/// Reusable STFT → mel → log pipeline for one [`FeatureConfig`].
pub struct MelExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl MelExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        // periodic Hann
        let n = cfg.win_length as f64;
        let window = (0..cfg.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(MelExtractor {
            cfg: cfg.clone(),
            window,
            fft,
            filterbank: MelFilterbank::new(cfg.sample_rate, cfg.n_fft),
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        let cfg = &self.cfg;
        if clip.sample_rate() != cfg.sample_rate {
            return Err(Error::Config(format!(
                "clip sampled at {} Hz, features configured for {} Hz",
                clip.sample_rate(),
                cfg.sample_rate
            )));
        }
        let samples = clip.samples();
        let frames = cfg.frame_count(samples.len()).ok_or_else(|| {
            Error::TooShort(format!(
                "{} samples is shorter than one {}-sample window",
                samples.len(),
                cfg.win_length
            ))
        })?;
        let n_bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        let mut data = vec![0.0; N_MELS * frames];
        for f in 0..frames {
            let start = f * cfg.hop_length;
            for (slot, (s, w)) in buf
                .iter_mut()
                .zip(samples[start..start + cfg.win_length].iter().zip(&self.window))
            {
                *slot = Complex::new(s * w, 0.0);
            }
            buf[cfg.win_length..].fill(Complex::new(0.0, 0.0));
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..N_MELS {
                let energy: f64 = self
                    .filterbank
                    .weights(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                data[m * frames + f] = (energy + cfg.log_floor).ln();
            }
        }
        MelSpectrogram::new(frames, data)
    }
}

/// One-shot convenience over [`MelExtractor`].
pub fn mel_spectrogram(clip: &AudioClip, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg)?.extract(clip)
}
