//! Clip-level audio embedders and class-probability models used by the metrics.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::Waveform;
use crate::error::Result;
use crate::registry::Registry;
use crate::semantic::{FrameEmbedder, LogMelEmbedder, SemanticConfig};

/// One vector per clip.
pub trait AudioEmbedder: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn embed(&self, waveform: &Waveform) -> Result<Vec<f32>>;
}

/// Per-clip probabilities over a fixed class set.
pub trait ClassModel: Send + Sync {
    fn name(&self) -> &'static str;
    fn n_classes(&self) -> usize;
    fn predict(&self, waveform: &Waveform) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderArgs {
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for EmbedderArgs {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            seed: 0x5eed_f00d,
        }
    }
}

pub const PROJECTED_DIM: usize = 128;

fn raw_log_mel(sample_rate: u32) -> Result<LogMelEmbedder> {
    LogMelEmbedder::new(&SemanticConfig {
        sample_rate,
        normalize: false,
        ..Default::default()
    })
}

/// Clip-mean log mel energies mapped into 128 dimensions by a seeded map with
/// orthonormal columns (distances are preserved).
pub struct ProjectedLogMel {
    mel: LogMelEmbedder,
    /// `PROJECTED_DIM x n_bands`.
    projection: DMatrix<f64>,
}

impl ProjectedLogMel {
    pub fn new(args: &EmbedderArgs) -> Result<Self> {
        let mel = raw_log_mel(args.sample_rate)?;
        let bands = mel.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let gaussian = DMatrix::from_fn(PROJECTED_DIM, bands, |_, _| StandardNormal.sample(&mut rng));
        let projection = gaussian.qr().q();
        Ok(Self { mel, projection })
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }
}

impl AudioEmbedder for ProjectedLogMel {
    fn name(&self) -> &'static str {
        "log-mel-128"
    }

    fn dim(&self) -> usize {
        PROJECTED_DIM
    }

    fn embed(&self, waveform: &Waveform) -> Result<Vec<f32>> {
        let frames = self.mel.embed("", waveform)?.embeddings;
        let n = frames.nrows() as f64;
        let mean = nalgebra::DVector::from_iterator(
            frames.ncols(),
            frames.columns().into_iter().map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / n),
        );
        Ok((&self.projection * mean).iter().map(|&v| v as f32).collect())
    }
}

/// Mean mel-band energy share: each band is treated as a class.
pub struct BandEnergyClasses {
    mel: LogMelEmbedder,
}

impl BandEnergyClasses {
    pub fn new(args: &EmbedderArgs) -> Result<Self> {
        Ok(Self {
            mel: raw_log_mel(args.sample_rate)?,
        })
    }
}

impl ClassModel for BandEnergyClasses {
    fn name(&self) -> &'static str {
        "band-energy"
    }

    fn n_classes(&self) -> usize {
        self.mel.dim()
    }

    fn predict(&self, waveform: &Waveform) -> Result<Vec<f64>> {
        let energies = self.mel.band_energies(waveform)?;
        let per_band: Vec<f64> = energies.columns().into_iter().map(|c| c.sum()).collect();
        let total: f64 = per_band.iter().sum();
        if total <= 0.0 {
            let k = per_band.len() as f64;
            return Ok(vec![1.0 / k; per_band.len()]);
        }
        Ok(per_band.into_iter().map(|e| e / total).collect())
    }
}

pub fn audio_embedder_registry() -> Registry<dyn AudioEmbedder, EmbedderArgs> {
    let mut reg: Registry<dyn AudioEmbedder, EmbedderArgs> = Registry::new("audio embedder");
    reg.register("log-mel-128", "clip-mean log mel, orthonormal projection to 128-d", |a| {
        Ok(Box::new(ProjectedLogMel::new(a)?))
    });
    reg
}

pub fn class_model_registry() -> Registry<dyn ClassModel, EmbedderArgs> {
    let mut reg: Registry<dyn ClassModel, EmbedderArgs> = Registry::new("class model");
    reg.register("band-energy", "mel band energy shares as class probabilities", |a| {
        Ok(Box::new(BandEnergyClasses::new(a)?))
    });
    reg
}
