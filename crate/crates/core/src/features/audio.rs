//! Deterministic spectral audio features, one row per video frame.
//!
//! This is a lightweight stand-in for a pretrained speech encoder: resample to
//! 16 kHz, take a Hann-windowed FFT centered on each video frame and pool the
//! log magnitude into mel-spaced bands. Externally computed encoder features
//! can be supplied instead through the feature-matrix file format.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FEATURE_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureConfig {
    pub fps: f64,
    pub bands: usize,
    pub window_ms: f64,
    pub fft_size: usize,
    /// Value reported for bands with no energy.
    pub log_floor: f64,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self {
            fps: 25.0,
            bands: 64,
            window_ms: 40.0,
            fft_size: 1024,
            log_floor: (1e-10f64).ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    /// `[T × D_a]`
    pub frames: Tensor,
    pub fps: f64,
}

impl AudioFeatureSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::EmptyInput("audio feature sequence is empty".into()));
        }
        if !frames.all_finite() {
            return Err(Error::InvalidArgument("audio features contain non-finite values".into()));
        }
        if !(fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// FFT-bin boundaries of the mel-spaced bands: band `b` pools bins
/// `edges[b]..edges[b + 1]`. Every band holds at least one bin.
pub fn band_edges(bands: usize, fft_size: usize, sample_rate: u32) -> Result<Vec<usize>> {
    let bins = fft_size / 2 + 1;
    if bands == 0 || bands > bins {
        return Err(Error::InvalidArgument(format!(
            "{bands} bands cannot be formed from {bins} FFT bins"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let mut edges = Vec::with_capacity(bands + 1);
    edges.push(0usize);
    for b in 1..bands {
        let hz = mel_to_hz(top * b as f64 / bands as f64);
        let bin = (hz / nyquist * (bins - 1) as f64).round() as usize;
        let min = edges[b - 1] + 1;
        let max = bins - (bands - b);
        edges.push(bin.clamp(min, max));
    }
    edges.push(bins);
    Ok(edges)
}

/// Index of the band whose bins include the one nearest to `hz`.
pub fn band_of_frequency(hz: f64, edges: &[usize], fft_size: usize, sample_rate: u32) -> usize {
    let bin = (hz * fft_size as f64 / sample_rate as f64).round() as usize;
    edges
        .windows(2)
        .position(|w| bin >= w[0] && bin < w[1])
        .unwrap_or(edges.len() - 2)
}

fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return samples.to_vec();
    }
    let n_out = ((samples.len() as f64 * to as f64 / from as f64).round() as usize).max(1);
    let step = from as f64 / to as f64;
    (0..n_out)
        .map(|i| {
            let x = i as f64 * step;
            let lo = x.floor() as usize;
            if lo + 1 >= samples.len() {
                return samples[samples.len() - 1];
            }
            let frac = x - lo as f64;
            samples[lo] + frac * (samples[lo + 1] - samples[lo])
        })
        .collect()
}

pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Frame-rate spectral features of a mono waveform.
pub fn extract_toy_audio_features(
    samples: &[f64],
    sample_rate: u32,
    config: &AudioFeatureConfig,
) -> Result<AudioFeatureSequence> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("waveform has no samples".into()));
    }
    if sample_rate < 8_000 {
        return Err(Error::InvalidArgument(format!(
            "sample rate {sample_rate} Hz is below the 8 kHz minimum"
        )));
    }
    if !(config.fps > 0.0) {
        return Err(Error::InvalidArgument("fps must be positive".into()));
    }
    let sr = FEATURE_SAMPLE_RATE;
    let audio = resample_linear(samples, sample_rate, sr);
    let window = ((config.window_ms / 1000.0) * sr as f64).round() as usize;
    if window == 0 || window > config.fft_size {
        return Err(Error::InvalidArgument(format!(
            "analysis window of {window} samples does not fit FFT size {}",
            config.fft_size
        )));
    }
    let edges = band_edges(config.bands, config.fft_size, sr)?;
    let taper = hann(window);
    let hop = sr as f64 / config.fps;
    let t_len = ((audio.len() as f64 / hop + 1e-9).floor() as usize).max(1);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); config.fft_size];
    let mut out = Tensor::zeros(t_len, config.bands);
    for i in 0..t_len {
        let center = ((i as f64 + 0.5) * hop).round() as isize;
        let start = center - (window / 2) as isize;
        for (n, slot) in buf.iter_mut().enumerate() {
            let v = if n < window {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < audio.len() {
                    audio[idx as usize] * taper[n]
                } else {
                    0.0
                }
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let row = out.row_mut(i);
        for (b, w) in edges.windows(2).enumerate() {
            let mean = buf[w[0]..w[1]].iter().map(|c| c.norm()).sum::<f64>() / (w[1] - w[0]) as f64;
            row[b] = mean.ln().max(config.log_floor);
        }
    }
    AudioFeatureSequence::new(out, config.fps)
}

/// Linear interpolation along time to exactly `target_len` rows.
pub fn align_audio_to_frames(features: &AudioFeatureSequence, target_len: usize) -> Result<AudioFeatureSequence> {
    if target_len < 1 {
        return Err(Error::InvalidArgument("target length must be at least 1".into()));
    }
    let src = &features.frames;
    let t = src.rows();
    if t == 0 {
        return Err(Error::EmptyInput("no audio features to align".into()));
    }
    if t == target_len {
        return Ok(features.clone());
    }
    let d = src.cols();
    let mut out = Tensor::zeros(target_len, d);
    for i in 0..target_len {
        let x = if target_len == 1 {
            0.0
        } else {
            (i * (t - 1)) as f64 / (target_len - 1) as f64
        };
        let lo = (x.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let frac = x - lo as f64;
        let (a, b) = (src.row(lo).to_vec(), src.row(hi));
        for ((o, av), bv) in out.row_mut(i).iter_mut().zip(&a).zip(b) {
            *o = av + frac * (bv - av);
        }
    }
    AudioFeatureSequence::new(out, features.fps)
}
