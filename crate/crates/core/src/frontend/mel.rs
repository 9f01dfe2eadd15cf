//! Log-mel spectrogram at a 100 Hz frame rate.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_MEL_BINS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Window length in samples (25 ms).
    pub window: usize,
    /// Hop in samples (10 ms).
    pub hop: usize,
    pub n_fft: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self::with_bins(DEFAULT_MEL_BINS)
    }
}

impl MelConfig {
    pub fn with_bins(mel_bins: usize) -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window: 400,
            hop: 160,
            n_fft: 512,
            mel_bins,
            fmin: 0.0,
            fmax: SAMPLE_RATE as f64 / 2.0,
            floor: 1e-10,
        }
    }

    pub fn frame_period(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Number of frames produced for `num_samples` samples, or `None` when
    /// the input does not cover a single window.
    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        (num_samples >= self.window).then(|| (num_samples - self.window) / self.hop + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `T × M`, one row per 10 ms frame.
    pub frames: Array2<f32>,
    pub frame_period: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn mel_bins(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `mel_bins × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_freqs = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.mel_bins, n_freqs));
    for m in 0..cfg.mel_bins {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Reusable frontend holding the filterbank, window and FFT plan.
pub struct MelFrontend {
    cfg: MelConfig,
    filterbank: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("cfg", &self.cfg).finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: MelConfig) -> Self {
        let filterbank = mel_filterbank(&cfg);
        // periodic Hann
        let window = (0..cfg.window)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.window as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Self {
            cfg,
            filterbank,
            window,
            fft,
        }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn compute(&self, samples: &[f32]) -> Result<MelSpectrogram> {
        let cfg = &self.cfg;
        let num_frames = cfg.num_frames(samples.len()).ok_or(Error::ClipTooShort {
            samples: samples.len(),
            needed: cfg.window,
        })?;
        let n_freqs = cfg.n_fft / 2 + 1;
        let mut frames = Array2::<f32>::zeros((num_frames, cfg.mel_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; n_freqs];
        for (t, mut row) in frames.rows_mut().into_iter().enumerate() {
            let start = t * cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (n, (&s, &w)) in samples[start..start + cfg.window].iter().zip(&self.window).enumerate() {
                buf[n] = Complex::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, out) in row.iter_mut().enumerate() {
                let energy: f64 = self.filterbank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                *out = (energy + cfg.floor).ln() as f32;
            }
        }
        Ok(MelSpectrogram {
            frames,
            frame_period: cfg.frame_period(),
        })
    }
}
