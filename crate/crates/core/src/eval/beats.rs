//! Spectral-flux beat detection and beat-alignment scores.

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::dsp::{MelFilterbank, PowerSpectrogram};
use crate::error::{CoreError, Result};

/// Beat times in seconds, strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatList {
    times: Vec<f64>,
}

impl BeatList {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(CoreError::Domain("beat times must be finite and non-negative".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::Domain("beat times must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn intervals(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Tempo from the median inter-beat interval, `None` with fewer than two beats.
    pub fn tempo_bpm(&self) -> Option<f64> {
        let mut iv = self.intervals();
        if iv.is_empty() {
            return None;
        }
        iv.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = iv.len() / 2;
        let median = if iv.len() % 2 == 1 {
            iv[mid]
        } else {
            0.5 * (iv[mid - 1] + iv[mid])
        };
        Some(60.0 / median)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeatTrackerConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_bands: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    /// Band energies more than this far below the clip's loudest band are
    /// clamped before the logarithm, so quiet tails do not produce flux.
    pub dynamic_range_db: f64,
    /// Minimum spacing between reported beats.
    pub min_gap_s: f64,
    /// Margin above the local mean, as a fraction of the envelope maximum.
    pub delta: f64,
    /// Half-width of the local-mean window.
    pub mean_window_s: f64,
    /// Half-width of the local-maximum neighbourhood.
    pub peak_radius_s: f64,
    /// Envelopes whose maximum is below this are treated as silence.
    pub min_flux: f64,
}

impl Default for BeatTrackerConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 640,
            hop: 160,
            n_bands: 64,
            fmin_hz: 20.0,
            fmax_hz: 8_000.0,
            log_floor: 1e-10,
            dynamic_range_db: 40.0,
            min_gap_s: 0.25,
            delta: 0.1,
            mean_window_s: 0.1,
            peak_radius_s: 0.05,
            min_flux: 1e-3,
        }
    }
}

pub struct BeatTracker {
    config: BeatTrackerConfig,
    spectrogram: PowerSpectrogram,
    filterbank: MelFilterbank,
}

impl BeatTracker {
    pub fn new(config: BeatTrackerConfig) -> Result<Self> {
        let spectrogram = PowerSpectrogram::new(config.window, config.hop)?;
        let filterbank = MelFilterbank::new(config.sample_rate, config.window, config.n_bands, config.fmin_hz, config.fmax_hz)?;
        Ok(Self {
            config,
            spectrogram,
            filterbank,
        })
    }

    pub fn config(&self) -> &BeatTrackerConfig {
        &self.config
    }

    fn frame_rate(&self) -> f64 {
        self.config.sample_rate as f64 / self.config.hop as f64
    }

    /// Half-wave rectified log-mel spectral flux, one value per frame.
    pub fn onset_envelope(&self, waveform: &Waveform) -> Result<Vec<f64>> {
        if waveform.sample_rate() != self.config.sample_rate {
            return Err(CoreError::Domain(format!(
                "beat tracker expects {} Hz, got {} Hz",
                self.config.sample_rate,
                waveform.sample_rate()
            )));
        }
        let spectra = self.spectrogram.compute(waveform.samples());
        let mel: Vec<Vec<f64>> = spectra
            .iter()
            .map(|power| {
                let mut bands = vec![0.0; self.filterbank.n_bands()];
                self.filterbank.apply(power, &mut bands);
                bands
            })
            .collect();
        let peak = mel.iter().flatten().copied().fold(0.0f64, f64::max);
        let floor = (peak * 10f64.powf(-self.config.dynamic_range_db / 10.0)).max(self.config.log_floor);
        // The signal is taken to start from silence, so an onset in the
        // first frame still produces flux.
        let mut prev = vec![floor.ln(); self.filterbank.n_bands()];
        let mut flux = Vec::with_capacity(mel.len());
        for bands in &mel {
            let logs: Vec<f64> = bands.iter().map(|e| e.max(floor).ln()).collect();
            flux.push(logs.iter().zip(&prev).map(|(a, b)| (a - b).max(0.0)).sum());
            prev = logs;
        }
        Ok(flux)
    }

    pub fn detect(&self, waveform: &Waveform) -> Result<BeatList> {
        if waveform.duration_s() < 1.0 {
            return Err(CoreError::Domain(format!(
                "beat detection needs at least 1 s of audio, got {:.3} s",
                waveform.duration_s()
            )));
        }
        let flux = self.onset_envelope(waveform)?;
        let max = flux.iter().copied().fold(0.0f64, f64::max);
        if max < self.config.min_flux {
            return Ok(BeatList::default());
        }
        let env: Vec<f64> = flux.iter().map(|f| f / max).collect();
        let fr = self.frame_rate();
        let radius = ((self.config.peak_radius_s * fr).round() as usize).max(1);
        let mean_half = ((self.config.mean_window_s * fr).round() as usize).max(1);
        let offset_s = self.config.window as f64 / 2.0 / self.config.sample_rate as f64;
        let duration = waveform.duration_s();

        let mut times: Vec<f64> = Vec::new();
        for t in 0..env.len() {
            let v = env[t];
            if v <= 0.0 {
                continue;
            }
            let lo = t.saturating_sub(radius);
            let hi = (t + radius).min(env.len() - 1);
            let is_peak = env[lo..t].iter().all(|&x| x < v) && env[t + 1..=hi].iter().all(|&x| x <= v);
            if !is_peak {
                continue;
            }
            let mlo = t.saturating_sub(mean_half);
            let mhi = (t + mean_half).min(env.len() - 1);
            let local_mean = env[mlo..=mhi].iter().sum::<f64>() / (mhi - mlo + 1) as f64;
            if v <= local_mean + self.config.delta {
                continue;
            }
            let time = (t as f64 / fr + offset_s).min(duration);
            if times.last().is_none_or(|&last| time - last >= self.config.min_gap_s) {
                times.push(time);
            }
        }
        BeatList::new(times)
    }
}

/// Convenience wrapper with the default tracker.
pub fn detect_beats(waveform: &Waveform) -> Result<BeatList> {
    BeatTracker::new(BeatTrackerConfig {
        sample_rate: waveform.sample_rate(),
        ..Default::default()
    })?
    .detect(waveform)
}

pub const DEFAULT_BEAT_TOLERANCE_S: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatScores {
    /// Coverage, `100 * min(|gen|, |ref|) / |ref|`.
    pub bcs: f64,
    /// Hits, `100 * matched / |ref|`.
    pub bhs: f64,
    pub f1: f64,
    /// Uncapped `100 * |gen| / |ref|`.
    pub raw_coverage: f64,
    pub matched: usize,
}

/// Harmonic mean of two percentages; zero when both are zero.
pub fn harmonic_f1(bcs: f64, bhs: f64) -> f64 {
    if bcs + bhs == 0.0 {
        0.0
    } else {
        2.0 * bcs * bhs / (bcs + bhs)
    }
}

/// Greedy one-to-one matching: each generated beat, in time order, takes the
/// nearest still-unmatched reference beat within `tolerance_s`.
pub fn greedy_matches(generated: &BeatList, reference: &BeatList, tolerance_s: f64) -> usize {
    let mut used = vec![false; reference.len()];
    let mut matched = 0;
    for &g in generated.times() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &r) in reference.times().iter().enumerate() {
            let d = (g - r).abs();
            if !used[j] && d <= tolerance_s && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            matched += 1;
        }
    }
    matched
}

pub fn beat_alignment(generated: &BeatList, reference: &BeatList, tolerance_s: f64) -> Result<BeatScores> {
    if !(tolerance_s > 0.0) {
        return Err(CoreError::Domain(format!("tolerance must be positive, got {tolerance_s}")));
    }
    if reference.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "beat scores are undefined for an empty reference beat list".into(),
        ));
    }
    let n_ref = reference.len() as f64;
    let matched = greedy_matches(generated, reference, tolerance_s);
    let bcs = 100.0 * (generated.len().min(reference.len()) as f64) / n_ref;
    let bhs = 100.0 * matched as f64 / n_ref;
    Ok(BeatScores {
        bcs,
        bhs,
        f1: harmonic_f1(bcs, bhs),
        raw_coverage: 100.0 * generated.len() as f64 / n_ref,
        matched,
    })
}
