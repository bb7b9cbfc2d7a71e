//! Signal-processing primitives shared by the tokenizers and the beat tracker.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{CoreError, Result};

/// Orthonormal type-II DCT of a fixed size, stored as a dense basis matrix.
///
/// Row `k` of the basis is `s_k cos(pi (n + 1/2) k / N)` with `s_0 = sqrt(1/N)`
/// and `s_k = sqrt(2/N)` otherwise, so the inverse is the transpose.
#[derive(Debug, Clone)]
pub struct Dct2 {
    size: usize,
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(CoreError::Domain("transform size must be at least 1".into()));
        }
        let n = size as f64;
        let mut basis = Vec::with_capacity(size * size);
        for k in 0..size {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..size {
                basis.push(scale * (PI * (i as f64 + 0.5) * k as f64 / n).cos());
            }
        }
        Ok(Self { size, basis })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Basis matrix in row-major order (`size x size`).
    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn forward(&self, input: &[f32], out: &mut [f32]) {
        debug_assert_eq!(input.len(), self.size);
        debug_assert_eq!(out.len(), self.size);
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.basis[k * self.size..(k + 1) * self.size];
            *o = row
                .iter()
                .zip(input)
                .map(|(b, x)| b * *x as f64)
                .sum::<f64>() as f32;
        }
    }

    pub fn inverse(&self, coeffs: &[f32], out: &mut [f32]) {
        debug_assert_eq!(coeffs.len(), self.size);
        debug_assert_eq!(out.len(), self.size);
        let mut acc = vec![0.0f64; self.size];
        for (k, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &self.basis[k * self.size..(k + 1) * self.size];
            for (a, b) in acc.iter_mut().zip(row) {
                *a += b * c as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
}

/// Converts Hz to mel on the HTK scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum of an `n_fft` transform.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_fft: usize,
    sample_rate: u32,
    /// `n_bands x (n_fft / 2 + 1)` weights, row-major.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_bands: usize, fmin: f64, fmax: f64) -> Result<Self> {
        if n_bands == 0 || n_fft < 2 {
            return Err(CoreError::Domain("filterbank needs n_bands >= 1 and n_fft >= 2".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
            return Err(CoreError::Domain(format!(
                "invalid filterbank range [{fmin}, {fmax}] for Nyquist {nyquist}"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_bands + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_bands + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_bands * n_bins];
        for b in 0..n_bands {
            let (lo, center, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for bin in 0..n_bins {
                let f = bin as f64 * bin_hz;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[b * n_bins + bin] = w;
            }
            // Narrow low bands can fall between bins; give them the nearest bin.
            if weights[b * n_bins..(b + 1) * n_bins].iter().all(|&w| w == 0.0) {
                let nearest = ((center / bin_hz).round() as usize).min(n_bins - 1);
                weights[b * n_bins + nearest] = 1.0;
            }
        }
        Ok(Self {
            n_fft,
            sample_rate,
            weights,
            centers_hz: edges[1..=n_bands].to_vec(),
        })
    }

    pub fn n_bands(&self) -> usize {
        self.centers_hz.len()
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn center_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        let n_bins = self.n_fft / 2 + 1;
        debug_assert_eq!(power.len(), n_bins);
        for (b, o) in out.iter_mut().enumerate() {
            let row = &self.weights[b * n_bins..(b + 1) * n_bins];
            *o = row.iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Hann-windowed power spectra of `window`-sample frames taken every `hop` samples.
pub struct PowerSpectrogram {
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl PowerSpectrogram {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        if window_len < 2 || hop == 0 {
            return Err(CoreError::Domain("spectrogram needs window >= 2 and hop >= 1".into()));
        }
        let window = (0..window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window_len as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(window_len);
        Ok(Self { window, hop, fft })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window.len() {
            0
        } else {
            (n_samples - self.window.len()) / self.hop + 1
        }
    }

    /// One-sided power spectrum (`window / 2 + 1` bins) per frame.
    pub fn compute(&self, samples: &[f32]) -> Vec<Vec<f64>> {
        let n = self.window.len();
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        (0..self.n_frames(samples.len()))
            .map(|f| {
                let start = f * self.hop;
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(samples[start + i] as f64 * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
            })
            .collect()
    }
}
