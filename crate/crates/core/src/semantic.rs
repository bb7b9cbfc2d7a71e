//! Semantic tokens: frame embeddings clustered by k-means, one token per frame.
//!
//! The default embedder computes clip-normalized log mel energies on
//! non-overlapping windows at the semantic frame rate. Precomputed embeddings
//! stored as tensor files can be used instead through the same trait.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::container::{read_tensor, CodebookFile, SEMANTIC_CODEBOOK_MAGIC};
use crate::dsp::{MelFilterbank, PowerSpectrogram};
use crate::error::{CoreError, Result};
use crate::kmeans::{self, KMeansParams};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    /// Registered embedder name, see [`embedder_registry`].
    pub embedder: String,
    pub sample_rate: u32,
    pub frame_rate: f64,
    pub n_bands: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Energy floor applied before the logarithm.
    pub log_floor: f64,
    /// Per-band mean/variance normalization over each clip.
    pub normalize: bool,
    pub vocab_size: usize,
    pub kmeans_iters: usize,
    /// Directory of `<clip id>.tensor` files for the `precomputed` embedder.
    pub precomputed_dir: Option<PathBuf>,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            embedder: "log-mel".into(),
            sample_rate: 16_000,
            frame_rate: 25.0,
            n_bands: 64,
            fmin_hz: 20.0,
            fmax_hz: 8_000.0,
            log_floor: 1e-10,
            normalize: true,
            vocab_size: 1024,
            kmeans_iters: 25,
            precomputed_dir: None,
        }
    }
}

impl SemanticConfig {
    pub fn hop(&self) -> Result<usize> {
        let hop = self.sample_rate as f64 / self.frame_rate;
        if !(hop >= 1.0) || (hop - hop.round()).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "semantic frame rate {} does not divide sample rate {}",
                self.frame_rate, self.sample_rate
            )));
        }
        Ok(hop.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.hop()?;
        if self.vocab_size < 2 {
            return Err(CoreError::Config("semantic vocab_size must be >= 2".into()));
        }
        if self.n_bands == 0 {
            return Err(CoreError::Config("semantic n_bands must be >= 1".into()));
        }
        Ok(())
    }
}

/// `T_s x D_sem` embeddings at `frame_rate` frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddingSequence {
    pub embeddings: Array2<f32>,
    pub frame_rate: f64,
}

impl FrameEmbeddingSequence {
    pub fn new(embeddings: Array2<f32>, frame_rate: f64) -> Result<Self> {
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Validation("frame embeddings contain non-finite values".into()));
        }
        Ok(Self {
            embeddings,
            frame_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Source of per-frame embeddings for semantic tokenization.
pub trait FrameEmbedder: Send + Sync {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn frame_rate(&self) -> f64;

    /// Embeds one clip. `clip_id` lets file-backed embedders locate their data.
    fn embed(&self, clip_id: &str, waveform: &Waveform) -> Result<FrameEmbeddingSequence>;
}

/// Log mel energies on non-overlapping Hann-windowed frames.
pub struct LogMelEmbedder {
    hop: usize,
    frame_rate: f64,
    sample_rate: u32,
    log_floor: f64,
    normalize: bool,
    spectrogram: PowerSpectrogram,
    filterbank: MelFilterbank,
}

impl LogMelEmbedder {
    pub fn new(config: &SemanticConfig) -> Result<Self> {
        let hop = config.hop()?;
        Ok(Self {
            hop,
            frame_rate: config.frame_rate,
            sample_rate: config.sample_rate,
            log_floor: config.log_floor,
            normalize: config.normalize,
            spectrogram: PowerSpectrogram::new(hop, hop)?,
            filterbank: MelFilterbank::new(config.sample_rate, hop, config.n_bands, config.fmin_hz, config.fmax_hz)?,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Mel band energies before the logarithm, `T x n_bands`.
    pub fn band_energies(&self, waveform: &Waveform) -> Result<Array2<f64>> {
        if waveform.sample_rate() != self.sample_rate {
            return Err(CoreError::Domain(format!(
                "embedder expects {} Hz audio, got {} Hz",
                self.sample_rate,
                waveform.sample_rate()
            )));
        }
        if waveform.len() < self.hop {
            return Err(CoreError::Domain(format!(
                "clip of {} samples is shorter than one {}-sample window",
                waveform.len(),
                self.hop
            )));
        }
        let spectra = self.spectrogram.compute(waveform.samples());
        let n_bands = self.filterbank.n_bands();
        let mut out = Array2::<f64>::zeros((spectra.len(), n_bands));
        for (mut row, power) in out.outer_iter_mut().zip(&spectra) {
            self.filterbank.apply(power, row.as_slice_mut().unwrap());
        }
        Ok(out)
    }
}

impl FrameEmbedder for LogMelEmbedder {
    fn name(&self) -> &'static str {
        "log-mel"
    }

    fn dim(&self) -> usize {
        self.filterbank.n_bands()
    }

    fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    fn embed(&self, _clip_id: &str, waveform: &Waveform) -> Result<FrameEmbeddingSequence> {
        let energies = self.band_energies(waveform)?;
        let mut logs = energies.mapv(|e| e.max(self.log_floor).ln());
        if self.normalize {
            normalize_columns(&mut logs);
        }
        FrameEmbeddingSequence::new(logs.mapv(|v| v as f32), self.frame_rate)
    }
}

/// Zero mean and unit variance per column; constant columns are only centered.
fn normalize_columns(m: &mut Array2<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-9 { 1.0 / std } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) * scale);
    }
}

/// Reads `<dir>/<clip id>.tensor` (`T x D` f32) produced by an external model.
pub struct PrecomputedEmbedder {
    dir: PathBuf,
    dim: usize,
    frame_rate: f64,
}

impl PrecomputedEmbedder {
    pub fn new(dir: impl Into<PathBuf>, dim: usize, frame_rate: f64) -> Self {
        Self {
            dir: dir.into(),
            dim,
            frame_rate,
        }
    }

    pub fn path_for(&self, clip_id: &str) -> PathBuf {
        self.dir.join(format!("{clip_id}.tensor"))
    }
}

impl FrameEmbedder for PrecomputedEmbedder {
    fn name(&self) -> &'static str {
        "precomputed"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    fn embed(&self, clip_id: &str, waveform: &Waveform) -> Result<FrameEmbeddingSequence> {
        let path = self.path_for(clip_id);
        let seq = load_embedding_tensor(&path, self.frame_rate)?;
        if seq.dim() != self.dim {
            return Err(CoreError::Shape(format!(
                "{} has dimension {}, expected {}",
                path.display(),
                seq.dim(),
                self.dim
            )));
        }
        let expected = (waveform.duration_s() * self.frame_rate + 1e-9).floor() as usize;
        if seq.len() != expected {
            return Err(CoreError::Shape(format!(
                "{} has {} frames, clip duration implies {expected}",
                path.display(),
                seq.len()
            )));
        }
        Ok(seq)
    }
}

pub fn load_embedding_tensor(path: &Path, frame_rate: f64) -> Result<FrameEmbeddingSequence> {
    let tensor = read_tensor(path)?;
    if tensor.shape.len() != 2 {
        return Err(CoreError::Shape(format!(
            "{}: expected a rank-2 tensor, found shape {:?}",
            path.display(),
            tensor.shape
        )));
    }
    let data = tensor.as_f32()?.to_vec();
    let embeddings = Array2::from_shape_vec((tensor.shape[0], tensor.shape[1]), data)
        .map_err(|e| CoreError::Shape(e.to_string()))?;
    FrameEmbeddingSequence::new(embeddings, frame_rate)
}

/// Embedders selectable by [`SemanticConfig::embedder`].
pub fn embedder_registry() -> Registry<dyn FrameEmbedder, SemanticConfig> {
    let mut reg: Registry<dyn FrameEmbedder, SemanticConfig> = Registry::new("frame embedder");
    reg.register("log-mel", "clip-normalized log mel energies", |cfg| {
        Ok(Box::new(LogMelEmbedder::new(cfg)?))
    });
    reg.register("precomputed", "tensor files named by clip id", |cfg| {
        let dir = cfg
            .precomputed_dir
            .clone()
            .ok_or_else(|| CoreError::Config("precomputed embedder needs precomputed_dir".into()))?;
        Ok(Box::new(PrecomputedEmbedder::new(dir, cfg.n_bands, cfg.frame_rate)))
    });
    reg
}

/// `K_s x D_sem` cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCodebook {
    pub centroids: Array2<f32>,
}

impl SemanticCodebook {
    pub fn new(centroids: Array2<f32>) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(CoreError::Validation("semantic codebook needs at least 2 centroids".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Validation("semantic codebook has non-finite centroids".into()));
        }
        Ok(Self { centroids })
    }

    pub fn vocab_size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        CodebookFile {
            n_levels: 1,
            vocab_size: self.vocab_size(),
            frame_size: self.dim(),
            centroids: self.centroids.iter().copied().collect(),
        }
        .write(path, SEMANTIC_CODEBOOK_MAGIC)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = CodebookFile::read(path, SEMANTIC_CODEBOOK_MAGIC)?;
        if file.n_levels != 1 {
            return Err(CoreError::format(path, format!("semantic codebook has {} levels", file.n_levels)));
        }
        let centroids = Array2::from_shape_vec((file.vocab_size, file.frame_size), file.centroids)
            .map_err(|e| CoreError::format(path, e.to_string()))?;
        Self::new(centroids)
    }

    /// Nearest-centroid index per frame (lowest index on ties).
    pub fn assign(&self, seq: &FrameEmbeddingSequence) -> Result<SemanticTokenSequence> {
        if seq.dim() != self.dim() {
            return Err(CoreError::Shape(format!(
                "embeddings have dimension {}, codebook has {}",
                seq.dim(),
                self.dim()
            )));
        }
        let tokens = seq
            .embeddings
            .outer_iter()
            .map(|row| {
                let row = row.to_vec();
                kmeans::nearest_centroid(self.centroids.view(), &row).0 as u32
            })
            .collect();
        Ok(SemanticTokenSequence {
            tokens,
            frame_rate: seq.frame_rate,
            vocab_size: self.vocab_size(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTokenSequence {
    pub tokens: Vec<u32>,
    pub frame_rate: f64,
    pub vocab_size: usize,
}

impl SemanticTokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// k-means over every frame of every sequence.
pub fn train_semantic_codebook(
    sequences: &[FrameEmbeddingSequence],
    k: usize,
    seed: u64,
    kmeans_iters: usize,
) -> Result<SemanticCodebook> {
    let total: usize = sequences.iter().map(FrameEmbeddingSequence::len).sum();
    if total < k {
        return Err(CoreError::InsufficientData {
            what: "embedding frames",
            needed: k,
            got: total,
        });
    }
    let dim = sequences[0].dim();
    if sequences.iter().any(|s| s.dim() != dim) {
        return Err(CoreError::Shape("embedding sequences have differing dimensions".into()));
    }
    let views: Vec<_> = sequences.iter().map(|s| s.embeddings.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| CoreError::Shape(e.to_string()))?;
    let params = KMeansParams {
        max_iters: kmeans_iters,
        pin_zero: false,
    };
    let fit = kmeans::fit(all.view(), k, &params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    SemanticCodebook::new(fit.centroids)
}

/// An embedder paired with a trained codebook.
pub struct SemanticTokenizer {
    embedder: Box<dyn FrameEmbedder>,
    codebook: SemanticCodebook,
}

impl SemanticTokenizer {
    pub fn new(embedder: Box<dyn FrameEmbedder>, codebook: SemanticCodebook) -> Result<Self> {
        if embedder.dim() != codebook.dim() {
            return Err(CoreError::Shape(format!(
                "embedder '{}' produces {}-d frames, codebook is {}-d",
                embedder.name(),
                embedder.dim(),
                codebook.dim()
            )));
        }
        Ok(Self { embedder, codebook })
    }

    pub fn codebook(&self) -> &SemanticCodebook {
        &self.codebook
    }

    pub fn embedder(&self) -> &dyn FrameEmbedder {
        self.embedder.as_ref()
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook.vocab_size()
    }

    pub fn frame_rate(&self) -> f64 {
        self.embedder.frame_rate()
    }

    pub fn tokenize(&self, clip_id: &str, waveform: &Waveform) -> Result<SemanticTokenSequence> {
        let seq = self.embedder.embed(clip_id, waveform)?;
        self.codebook.assign(&seq)
    }
}
