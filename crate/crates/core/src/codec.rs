//! Residual-vector-quantized acoustic codec.
//!
//! Audio is cut into non-overlapping frames, each frame is mapped through an
//! orthonormal DCT-II, and the coefficient vectors are quantized by a stack of
//! codebooks where level `l` encodes what levels `0..l` left over. Because the
//! transform is orthonormal, the waveform reconstruction error of a decode is
//! exactly the coefficient-domain quantization residual.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::container::{CodebookFile, CODEC_CODEBOOK_MAGIC};
use crate::dsp::Dct2;
use crate::error::{CoreError, Result};
use crate::kmeans::{self, KMeansParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Samples per analysis frame.
    pub frame_size: usize,
    /// Total number of quantizer levels.
    pub n_levels: usize,
    /// Levels modeled by the coarse acoustic stage.
    pub n_coarse: usize,
    /// Levels modeled by the fine acoustic stage.
    pub n_fine: usize,
    /// Codes per level.
    pub vocab_size: usize,
    pub kmeans_iters: usize,
    /// Upper bound on frames used for codebook training; larger sets are
    /// subsampled with the training seed.
    pub max_training_frames: Option<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            frame_size: 320,
            n_levels: 8,
            n_coarse: 4,
            n_fine: 4,
            vocab_size: 256,
            kmeans_iters: 25,
            max_training_frames: None,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.n_coarse < 1 || self.n_fine < 1 {
            return fail(format!(
                "codec needs at least one coarse and one fine level (n_coarse={}, n_fine={})",
                self.n_coarse, self.n_fine
            ));
        }
        if self.n_coarse + self.n_fine != self.n_levels {
            return fail(format!(
                "n_coarse + n_fine = {} but n_levels = {}",
                self.n_coarse + self.n_fine,
                self.n_levels
            ));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.frame_size < 1 {
            return fail("frame_size must be >= 1".into());
        }
        Ok(())
    }

    /// Acoustic frames per second at `sample_rate`.
    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.frame_size as f64
    }
}

/// One quantizer level.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub level: usize,
    /// `vocab_size x frame_size`.
    pub centroids: Array2<f32>,
}

/// Discrete codes, `n_frames x n_levels`, each in `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AcousticTokenGrid {
    tokens: Vec<u32>,
    n_frames: usize,
    n_levels: usize,
    vocab_size: usize,
}

impl AcousticTokenGrid {
    pub fn new(tokens: Vec<u32>, n_frames: usize, n_levels: usize, vocab_size: usize) -> Result<Self> {
        if tokens.len() != n_frames * n_levels {
            return Err(CoreError::Shape(format!(
                "{} tokens cannot form a {n_frames}x{n_levels} grid",
                tokens.len()
            )));
        }
        if let Some((i, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab_size) {
            return Err(CoreError::Validation(format!(
                "token {t} at frame {}, level {} is outside [0, {vocab_size})",
                i / n_levels.max(1),
                i % n_levels.max(1)
            )));
        }
        Ok(Self {
            tokens,
            n_frames,
            n_levels,
            vocab_size,
        })
    }

    pub fn from_rows(rows: &[Vec<u32>], vocab_size: usize) -> Result<Self> {
        let n_levels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_levels) {
            return Err(CoreError::Shape("grid rows have differing level counts".into()));
        }
        Self::new(rows.concat(), rows.len(), n_levels, vocab_size)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn get(&self, frame: usize, level: usize) -> u32 {
        self.tokens[frame * self.n_levels + level]
    }

    pub fn frame(&self, frame: usize) -> &[u32] {
        &self.tokens[frame * self.n_levels..(frame + 1) * self.n_levels]
    }

    /// Frame-major token storage.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Keeps levels `levels` of every frame.
    pub fn select_levels(&self, levels: std::ops::Range<usize>) -> Result<Self> {
        if levels.end > self.n_levels || levels.start > levels.end {
            return Err(CoreError::Shape(format!(
                "level range {levels:?} outside grid with {} levels",
                self.n_levels
            )));
        }
        let tokens = (0..self.n_frames)
            .flat_map(|t| self.frame(t)[levels.clone()].iter().copied())
            .collect();
        Self::new(tokens, self.n_frames, levels.len(), self.vocab_size)
    }

    /// Level-wise concatenation: frame `t` of the result is `self[t] ++ other[t]`.
    pub fn concat_levels(&self, other: &AcousticTokenGrid) -> Result<Self> {
        if self.n_frames != other.n_frames || self.vocab_size != other.vocab_size {
            return Err(CoreError::Shape(format!(
                "cannot join {}-frame grid (vocab {}) with {}-frame grid (vocab {})",
                self.n_frames, self.vocab_size, other.n_frames, other.vocab_size
            )));
        }
        let tokens = (0..self.n_frames)
            .flat_map(|t| self.frame(t).iter().chain(other.frame(t)).copied())
            .collect();
        Self::new(tokens, self.n_frames, self.n_levels + other.n_levels, self.vocab_size)
    }

    /// Frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_frames {
            return Err(CoreError::Shape(format!(
                "frames [{start}, {}) outside grid of {} frames",
                start + len,
                self.n_frames
            )));
        }
        Self::new(
            self.tokens[start * self.n_levels..(start + len) * self.n_levels].to_vec(),
            len,
            self.n_levels,
            self.vocab_size,
        )
    }

    /// Frame-wise concatenation (time axis).
    pub fn append_frames(&self, other: &AcousticTokenGrid) -> Result<Self> {
        if self.n_levels != other.n_levels || self.vocab_size != other.vocab_size {
            return Err(CoreError::Shape("cannot append grids with different level layouts".into()));
        }
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        Self::new(tokens, self.n_frames + other.n_frames, self.n_levels, self.vocab_size)
    }
}

/// Cuts `waveform` into non-overlapping `frame_size` frames (last one zero-padded)
/// and applies the orthonormal DCT-II to each. Returns `n_frames x frame_size`.
pub fn frame_transform(waveform: &Waveform, frame_size: usize) -> Result<Array2<f32>> {
    let dct = Dct2::new(frame_size)?;
    transform_with(&dct, waveform.samples())
}

fn transform_with(dct: &Dct2, samples: &[f32]) -> Result<Array2<f32>> {
    let frame_size = dct.size();
    if samples.is_empty() {
        return Err(CoreError::Domain("cannot transform an empty waveform".into()));
    }
    if samples.len() < frame_size {
        return Err(CoreError::Domain(format!(
            "waveform of {} samples is shorter than one {frame_size}-sample frame",
            samples.len()
        )));
    }
    let n_frames = samples.len().div_ceil(frame_size);
    let mut out = Array2::<f32>::zeros((n_frames, frame_size));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(f, mut row)| {
            let start = f * frame_size;
            let end = (start + frame_size).min(samples.len());
            let mut frame = vec![0.0f32; frame_size];
            frame[..end - start].copy_from_slice(&samples[start..end]);
            dct.forward(&frame, row.as_slice_mut().unwrap());
        });
    Ok(out)
}

/// Inverse of [`frame_transform`]: `n_frames x frame_size` coefficients to
/// `n_frames * frame_size` samples.
pub fn inverse_frame_transform(coeffs: ArrayView2<'_, f32>) -> Result<Vec<f32>> {
    let dct = Dct2::new(coeffs.ncols())?;
    Ok(inverse_with(&dct, coeffs))
}

fn inverse_with(dct: &Dct2, coeffs: ArrayView2<'_, f32>) -> Vec<f32> {
    let frame_size = dct.size();
    let mut out = vec![0.0f32; coeffs.nrows() * frame_size];
    out.par_chunks_mut(frame_size)
        .zip(coeffs.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(chunk, row)| {
            let row = row.to_vec();
            dct.inverse(&row, chunk);
        });
    out
}

/// Trains one codebook per level by k-means on the running residual.
///
/// Levels after the first keep centroid 0 pinned at the origin, so choosing
/// the nearest code never increases a frame's residual.
pub fn train_codebooks(frames: ArrayView2<'_, f32>, config: &CodecConfig, seed: u64) -> Result<Vec<Codebook>> {
    config.validate()?;
    if frames.ncols() != config.frame_size {
        return Err(CoreError::Shape(format!(
            "frames have {} coefficients, config expects {}",
            frames.ncols(),
            config.frame_size
        )));
    }
    if frames.nrows() < config.vocab_size {
        return Err(CoreError::InsufficientData {
            what: "frames",
            needed: config.vocab_size,
            got: frames.nrows(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = match config.max_training_frames {
        Some(max) if max < frames.nrows() => {
            let max = max.max(config.vocab_size);
            let mut idx = rand::seq::index::sample(&mut rng, frames.nrows(), max).into_vec();
            idx.sort_unstable();
            frames.select(Axis(0), &idx)
        }
        _ => frames.to_owned(),
    };

    let mut codebooks = Vec::with_capacity(config.n_levels);
    for level in 0..config.n_levels {
        let params = KMeansParams {
            max_iters: config.kmeans_iters,
            pin_zero: level > 0,
        };
        let fit = kmeans::fit(residual.view(), config.vocab_size, &params, &mut rng)?;
        for (mut row, &j) in residual.outer_iter_mut().zip(&fit.assignments) {
            row -= &fit.centroids.row(j);
        }
        codebooks.push(Codebook {
            level,
            centroids: fit.centroids,
        });
    }
    Ok(codebooks)
}

/// Nearest-code greedy quantization of one coefficient vector. Writes the codes
/// into `codes` and leaves the final residual in `residual`.
pub fn quantize_frame(codebooks: &[Codebook], residual: &mut [f32], codes: &mut [u32]) {
    for (cb, code) in codebooks.iter().zip(codes.iter_mut()) {
        let (j, _) = kmeans::nearest_centroid(cb.centroids.view(), residual);
        *code = j as u32;
        for (r, c) in residual.iter_mut().zip(cb.centroids.row(j)) {
            *r -= c;
        }
    }
}

/// A configured codec with (possibly not yet trained) codebooks.
#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    dct: Dct2,
    codebooks: Vec<Codebook>,
}

impl Codec {
    pub fn untrained(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let dct = Dct2::new(config.frame_size)?;
        Ok(Self {
            config,
            dct,
            codebooks: Vec::new(),
        })
    }

    pub fn with_codebooks(config: CodecConfig, codebooks: Vec<Codebook>) -> Result<Self> {
        let mut codec = Self::untrained(config)?;
        codec.set_codebooks(codebooks)?;
        Ok(codec)
    }

    /// Trains codebooks on the frames of every clip in `clips`.
    pub fn train(config: CodecConfig, clips: &[Waveform], seed: u64) -> Result<Self> {
        let mut codec = Self::untrained(config)?;
        let parts = clips
            .iter()
            .map(|w| transform_with(&codec.dct, w.samples()))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let frames = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| CoreError::Shape(format!("cannot stack training frames: {e}")))?;
        let codebooks = train_codebooks(frames.view(), &codec.config, seed)?;
        codec.codebooks = codebooks;
        Ok(codec)
    }

    fn set_codebooks(&mut self, codebooks: Vec<Codebook>) -> Result<()> {
        if codebooks.len() != self.config.n_levels {
            return Err(CoreError::Shape(format!(
                "expected {} codebooks, got {}",
                self.config.n_levels,
                codebooks.len()
            )));
        }
        for (i, cb) in codebooks.iter().enumerate() {
            if cb.level != i || cb.centroids.dim() != (self.config.vocab_size, self.config.frame_size) {
                return Err(CoreError::Shape(format!(
                    "codebook {i} has level {} and shape {:?}, expected ({}, {})",
                    cb.level,
                    cb.centroids.dim(),
                    self.config.vocab_size,
                    self.config.frame_size
                )));
            }
            if cb.centroids.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Validation(format!("codebook {i} has non-finite centroids")));
            }
        }
        self.codebooks = codebooks;
        Ok(())
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn is_trained(&self) -> bool {
        self.codebooks.len() == self.config.n_levels
    }

    fn require_trained(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(CoreError::State("codec codebooks have not been trained".into()))
        }
    }

    pub fn transform(&self, waveform: &Waveform) -> Result<Array2<f32>> {
        transform_with(&self.dct, waveform.samples())
    }

    pub fn encode(&self, waveform: &Waveform) -> Result<AcousticTokenGrid> {
        self.require_trained()?;
        let coeffs = self.transform(waveform)?;
        self.encode_coefficients(coeffs.view())
    }

    pub fn encode_coefficients(&self, coeffs: ArrayView2<'_, f32>) -> Result<AcousticTokenGrid> {
        self.require_trained()?;
        if coeffs.ncols() != self.config.frame_size {
            return Err(CoreError::Shape(format!(
                "coefficient width {} does not match frame size {}",
                coeffs.ncols(),
                self.config.frame_size
            )));
        }
        let n_levels = self.config.n_levels;
        let mut tokens = vec![0u32; coeffs.nrows() * n_levels];
        tokens
            .par_chunks_mut(n_levels)
            .zip(coeffs.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(codes, row)| {
                let mut residual = row.to_vec();
                quantize_frame(&self.codebooks, &mut residual, codes);
            });
        AcousticTokenGrid::new(tokens, coeffs.nrows(), n_levels, self.config.vocab_size)
    }

    /// Sum of the selected centroids of the first `levels_used` levels per frame.
    pub fn dequantize(&self, grid: &AcousticTokenGrid, levels_used: usize) -> Result<Array2<f32>> {
        self.require_trained()?;
        if levels_used < 1 || levels_used > self.config.n_levels {
            return Err(CoreError::Domain(format!(
                "levels_used must be in [1, {}], got {levels_used}",
                self.config.n_levels
            )));
        }
        if grid.n_levels() < levels_used {
            return Err(CoreError::Shape(format!(
                "grid has {} levels, cannot decode {levels_used}",
                grid.n_levels()
            )));
        }
        if grid.vocab_size() != self.config.vocab_size {
            return Err(CoreError::Shape(format!(
                "grid vocabulary {} does not match codec vocabulary {}",
                grid.vocab_size(),
                self.config.vocab_size
            )));
        }
        let mut coeffs = Array2::<f32>::zeros((grid.n_frames(), self.config.frame_size));
        for (t, mut row) in coeffs.outer_iter_mut().enumerate() {
            for (level, cb) in self.codebooks[..levels_used].iter().enumerate() {
                row += &cb.centroids.row(grid.get(t, level) as usize);
            }
        }
        Ok(coeffs)
    }

    /// Reconstructs `n_frames * frame_size` samples.
    pub fn decode(&self, grid: &AcousticTokenGrid, levels_used: usize, sample_rate: u32) -> Result<Waveform> {
        let coeffs = self.dequantize(grid, levels_used)?;
        Waveform::new(inverse_with(&self.dct, coeffs.view()), sample_rate)
    }

    /// Like [`Codec::decode`] but truncated to `len` samples.
    pub fn decode_to_length(
        &self,
        grid: &AcousticTokenGrid,
        levels_used: usize,
        sample_rate: u32,
        len: usize,
    ) -> Result<Waveform> {
        let mut samples = self.decode(grid, levels_used, sample_rate)?.into_samples();
        if len > samples.len() {
            return Err(CoreError::Shape(format!(
                "requested {len} samples from a {}-sample decode",
                samples.len()
            )));
        }
        samples.truncate(len);
        Waveform::new(samples, sample_rate)
    }

    /// Splits a full grid into its coarse (first `n_coarse`) and fine levels.
    pub fn split_coarse_fine(&self, grid: &AcousticTokenGrid) -> Result<(AcousticTokenGrid, AcousticTokenGrid)> {
        split_coarse_fine(grid, &self.config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.require_trained()?;
        let mut centroids = Vec::with_capacity(self.config.n_levels * self.config.vocab_size * self.config.frame_size);
        for cb in &self.codebooks {
            centroids.extend(cb.centroids.iter().copied());
        }
        CodebookFile {
            n_levels: self.config.n_levels,
            vocab_size: self.config.vocab_size,
            frame_size: self.config.frame_size,
            centroids,
        }
        .write(path, CODEC_CODEBOOK_MAGIC)
    }

    /// Loads codebooks; the coarse/fine split comes from `config`, the shape
    /// fields must agree with the file header.
    pub fn load(path: impl AsRef<Path>, config: CodecConfig) -> Result<Self> {
        let path = path.as_ref();
        let file = CodebookFile::read(path, CODEC_CODEBOOK_MAGIC)?;
        if (file.n_levels, file.vocab_size, file.frame_size) != (config.n_levels, config.vocab_size, config.frame_size) {
            return Err(CoreError::Config(format!(
                "{} holds {}x{}x{} codebooks, configuration expects {}x{}x{}",
                path.display(),
                file.n_levels,
                file.vocab_size,
                file.frame_size,
                config.n_levels,
                config.vocab_size,
                config.frame_size
            )));
        }
        let per_level = file.vocab_size * file.frame_size;
        let codebooks = (0..file.n_levels)
            .map(|level| Codebook {
                level,
                centroids: Array2::from_shape_vec(
                    (file.vocab_size, file.frame_size),
                    file.centroids[level * per_level..(level + 1) * per_level].to_vec(),
                )
                .expect("sizes checked by reader"),
            })
            .collect();
        Self::with_codebooks(config, codebooks)
    }
}

pub fn split_coarse_fine(
    grid: &AcousticTokenGrid,
    config: &CodecConfig,
) -> Result<(AcousticTokenGrid, AcousticTokenGrid)> {
    if grid.n_levels() != config.n_levels {
        return Err(CoreError::Shape(format!(
            "grid has {} levels, codec has {}",
            grid.n_levels(),
            config.n_levels
        )));
    }
    Ok((
        grid.select_levels(0..config.n_coarse)?,
        grid.select_levels(config.n_coarse..config.n_levels)?,
    ))
}
