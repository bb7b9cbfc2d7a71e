//! Mono waveforms and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{CoreError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio signal with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::Domain("waveform is empty".into()));
        }
        if sample_rate == 0 {
            return Err(CoreError::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CoreError::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sub-range `[start, start + len)` in samples.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.samples.len())
            .ok_or_else(|| {
                CoreError::Domain(format!(
                    "slice [{start}, {start}+{len}) exceeds waveform of {} samples",
                    self.samples.len()
                ))
            })?;
        Self::new(self.samples[start..end].to_vec(), self.sample_rate)
    }

    pub fn scaled(&self, gain: f32) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }

    pub fn concat(&self, other: &Waveform) -> Result<Self> {
        if self.sample_rate != other.sample_rate {
            return Err(CoreError::Shape(format!(
                "cannot concatenate {} Hz with {} Hz audio",
                self.sample_rate, other.sample_rate
            )));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Self::new(samples, self.sample_rate)
    }

    pub fn mean_squared_error(&self, other: &Waveform) -> Result<f64> {
        if self.len() != other.len() {
            return Err(CoreError::Shape(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let sum: f64 = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(sum / self.len() as f64)
    }

    /// Writes 16-bit PCM mono. Samples are clipped to `[-1, 1]`.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let wav_err = |source| CoreError::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            writer.write_sample(to_pcm16(s)).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| CoreError::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(CoreError::format(
                path,
                format!(
                    "expected 16-bit PCM mono, found {} channel(s) {}-bit {:?}",
                    spec.channels, spec.bits_per_sample, spec.sample_format
                ),
            ));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(from_pcm16))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        Self::new(samples, spec.sample_rate)
    }
}

fn to_pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16
}

fn from_pcm16(s: i16) -> f32 {
    s as f32 / i16::MAX as f32
}
