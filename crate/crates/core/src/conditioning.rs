//! Visual conditioning features, style embeddings and encoder stream assembly.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const STYLE_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Per-frame image-text embeddings.
    ClipLike,
    /// Per-frame optical-flow video embeddings.
    FlowLike,
    /// Pooled discrete visual tokens.
    VisualTokens,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::ClipLike, FeatureKind::FlowLike, FeatureKind::VisualTokens];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::ClipLike => "clip-like",
            FeatureKind::FlowLike => "flow-like",
            FeatureKind::VisualTokens => "visual-tokens",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown feature kind '{s}'")))
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Adaptor key used for the style position.
pub const STYLE_ADAPTOR: &str = "style";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub frame_rate: f64,
    pub clip_dim: usize,
    pub flow_dim: usize,
    pub token_vocab: usize,
    pub tokens_per_frame: usize,
    /// Width of the fixed table used to pool visual tokens.
    pub token_embedding_dim: usize,
    pub token_table_seed: u64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            frame_rate: 1.0,
            clip_dim: 768,
            flow_dim: 1024,
            token_vocab: 8192,
            tokens_per_frame: 1024,
            token_embedding_dim: 64,
            token_table_seed: 0x7ab1e,
        }
    }
}

impl ConditioningConfig {
    pub fn dim_of(&self, kind: FeatureKind) -> usize {
        match kind {
            FeatureKind::ClipLike => self.clip_dim,
            FeatureKind::FlowLike => self.flow_dim,
            FeatureKind::VisualTokens => self.token_embedding_dim,
        }
    }

    /// Seeded Gaussian table (`token_vocab x token_embedding_dim`, std `1/sqrt(dim)`).
    pub fn token_table(&self) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.token_table_seed);
        let normal = Normal::new(0.0, 1.0 / (self.token_embedding_dim as f64).sqrt()).unwrap();
        Array2::from_shape_simple_fn((self.token_vocab, self.token_embedding_dim), || {
            normal.sample(&mut rng) as f32
        })
    }
}

/// Per-frame continuous visual features, `T x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbeddingSequence {
    pub kind: FeatureKind,
    pub vectors: Array2<f32>,
    pub frame_rate: f64,
}

impl VisualEmbeddingSequence {
    pub fn new(kind: FeatureKind, vectors: Array2<f32>, frame_rate: f64) -> Self {
        Self {
            kind,
            vectors,
            frame_rate,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Discrete visual tokens, `n_frames x tokens_per_frame`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualTokenGrid {
    pub tokens: Vec<u32>,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub vocab_size: usize,
}

impl VisualTokenGrid {
    /// Shape-checked; token ranges are checked by [`validate_bundle`] and pooling.
    pub fn new(tokens: Vec<u32>, n_frames: usize, tokens_per_frame: usize, vocab_size: usize) -> Result<Self> {
        if tokens.len() != n_frames * tokens_per_frame {
            return Err(CoreError::Shape(format!(
                "{} visual tokens do not form {n_frames} frames of {tokens_per_frame}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            n_frames,
            tokens_per_frame,
            vocab_size,
        })
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.tokens[t * self.tokens_per_frame..(t + 1) * self.tokens_per_frame]
    }
}

/// Clip-level style control, unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    vector: Vec<f32>,
}

impl StyleEmbedding {
    /// Normalizes `vector` to unit length.
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if vector.len() != STYLE_DIM {
            return Err(CoreError::Shape(format!(
                "style embedding must have {STYLE_DIM} dimensions, got {}",
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Domain("style embedding has non-finite entries".into()));
        }
        let norm = vector.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(CoreError::Domain("style embedding has zero norm".into()));
        }
        Ok(Self {
            vector: vector.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }
}

/// Everything a generation is conditioned on, at a shared frame rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditioningBundle {
    pub features: Vec<VisualEmbeddingSequence>,
    pub tokens: Option<VisualTokenGrid>,
    pub style: Option<StyleEmbedding>,
    pub duration_s: f64,
}

impl ConditioningBundle {
    pub fn n_frames(&self, frame_rate: f64) -> usize {
        (self.duration_s * frame_rate + 1e-9).floor() as usize
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        let mut kinds: Vec<FeatureKind> = self.features.iter().map(|f| f.kind).collect();
        if self.tokens.is_some() {
            kinds.push(FeatureKind::VisualTokens);
        }
        kinds
    }

    pub fn without_style(&self) -> Self {
        Self {
            style: None,
            ..self.clone()
        }
    }

    /// Frames `[start, start + len)` of every per-frame track; duration becomes
    /// `len / frame_rate`.
    pub fn crop_frames(&self, start: usize, len: usize, frame_rate: f64) -> Result<Self> {
        let check = |n: usize, what: &str| {
            if start + len > n {
                Err(CoreError::Dataset(format!(
                    "crop [{start}, {}) exceeds {n} {what} frames",
                    start + len
                )))
            } else {
                Ok(())
            }
        };
        let features = self
            .features
            .iter()
            .map(|f| {
                check(f.n_frames(), f.kind.as_str())?;
                Ok(VisualEmbeddingSequence {
                    vectors: f.vectors.slice(ndarray::s![start..start + len, ..]).to_owned(),
                    ..f.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = match &self.tokens {
            Some(g) => {
                check(g.n_frames, "visual-token")?;
                Some(VisualTokenGrid::new(
                    g.tokens[start * g.tokens_per_frame..(start + len) * g.tokens_per_frame].to_vec(),
                    len,
                    g.tokens_per_frame,
                    g.vocab_size,
                )?)
            }
            None => None,
        };
        Ok(Self {
            features,
            tokens,
            style: self.style.clone(),
            duration_s: len as f64 / frame_rate,
        })
    }
}

/// Mean of segment-level style vectors, then unit-normalized.
pub fn average_segment_embeddings(segments: &[Vec<f32>]) -> Result<StyleEmbedding> {
    let first = segments
        .first()
        .ok_or_else(|| CoreError::Domain("cannot average an empty list of segments".into()))?;
    if first.len() != STYLE_DIM || segments.iter().any(|s| s.len() != STYLE_DIM) {
        return Err(CoreError::Shape(format!("every segment must have {STYLE_DIM} dimensions")));
    }
    let mut mean = vec![0.0f64; STYLE_DIM];
    for s in segments {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += *v as f64;
        }
    }
    let j = segments.len() as f64;
    StyleEmbedding::new(mean.into_iter().map(|m| (m / j) as f32).collect())
}

/// Mean token embedding per frame.
pub fn pool_token_grid(grid: &VisualTokenGrid, table: ArrayView2<'_, f32>) -> Result<VisualEmbeddingSequence> {
    if table.nrows() < grid.vocab_size {
        return Err(CoreError::Shape(format!(
            "embedding table has {} rows for a vocabulary of {}",
            table.nrows(),
            grid.vocab_size
        )));
    }
    if grid.tokens_per_frame == 0 {
        return Err(CoreError::Shape("visual token grid has no tokens per frame".into()));
    }
    if let Some((i, t)) = grid
        .tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= grid.vocab_size)
    {
        return Err(CoreError::Validation(format!(
            "visual token {t} at frame {} is outside [0, {})",
            i / grid.tokens_per_frame,
            grid.vocab_size
        )));
    }
    let dim = table.ncols();
    let mut out = Array2::<f32>::zeros((grid.n_frames, dim));
    for (t, mut row) in out.outer_iter_mut().enumerate() {
        let mut acc = vec![0.0f64; dim];
        for &tok in grid.frame(t) {
            for (a, v) in acc.iter_mut().zip(table.row(tok as usize)) {
                *a += *v as f64;
            }
        }
        let inv = 1.0 / grid.tokens_per_frame as f64;
        for (r, a) in row.iter_mut().zip(acc) {
            *r = (a * inv) as f32;
        }
    }
    Ok(VisualEmbeddingSequence::new(FeatureKind::VisualTokens, out, 1.0))
}

/// Affine map `x W + b` from a feature space into the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptor {
    /// `in_dim x out_dim`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Adaptor {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(CoreError::Shape(format!(
                "adaptor weight is {:?} but bias has {} entries",
                weight.dim(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.in_dim() {
            return Err(CoreError::Shape(format!(
                "adaptor expects {}-d input, got {}-d",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }
}

/// One contribution to the encoder stream: `rows` are projected by the
/// adaptor named `adaptor` and added at positions `offset..offset + rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTrack {
    pub adaptor: String,
    pub offset: usize,
    pub rows: Array2<f32>,
}

/// Positions of every track in the encoder stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamLayout {
    pub len: usize,
    pub tracks: Vec<StreamTrack>,
}

impl StreamLayout {
    /// Style (if any) at position 0, then one position per frame with every
    /// feature kind summed into it.
    pub fn from_bundle(bundle: &ConditioningBundle, config: &ConditioningConfig) -> Result<Self> {
        let frames = bundle.n_frames(config.frame_rate);
        let offset = usize::from(bundle.style.is_some());
        let mut tracks = Vec::new();
        if let Some(style) = &bundle.style {
            tracks.push(StreamTrack {
                adaptor: STYLE_ADAPTOR.into(),
                offset: 0,
                rows: Array2::from_shape_vec((1, STYLE_DIM), style.as_slice().to_vec()).unwrap(),
            });
        }
        let mut add = |kind: FeatureKind, rows: Array2<f32>| -> Result<()> {
            if rows.nrows() != frames {
                return Err(CoreError::Validation(format!(
                    "{kind} features have {} frames, bundle duration implies {frames}",
                    rows.nrows()
                )));
            }
            tracks.push(StreamTrack {
                adaptor: kind.as_str().into(),
                offset,
                rows,
            });
            Ok(())
        };
        for f in &bundle.features {
            add(f.kind, f.vectors.clone())?;
        }
        if let Some(grid) = &bundle.tokens {
            let table = config.token_table();
            add(FeatureKind::VisualTokens, pool_token_grid(grid, table.view())?.vectors)?;
        }
        Ok(Self {
            len: offset + frames,
            tracks,
        })
    }

    /// Appends a track after the current end of the stream.
    pub fn push_back(&mut self, adaptor: impl Into<String>, rows: Array2<f32>) {
        let n = rows.nrows();
        self.tracks.push(StreamTrack {
            adaptor: adaptor.into(),
            offset: self.len,
            rows,
        });
        self.len += n;
    }
}

/// Named adaptors for [`assemble_encoder_stream`].
pub type Adaptors = BTreeMap<String, Adaptor>;

/// Projects every track of `bundle` into `d_model` and lays them out as
/// `[style?] ++ frames`.
pub fn assemble_encoder_stream(
    bundle: &ConditioningBundle,
    adaptors: &Adaptors,
    config: &ConditioningConfig,
) -> Result<Array2<f32>> {
    let layout = StreamLayout::from_bundle(bundle, config)?;
    assemble_layout(&layout, adaptors)
}

pub fn assemble_layout(layout: &StreamLayout, adaptors: &Adaptors) -> Result<Array2<f32>> {
    let d_model = adaptors
        .values()
        .next()
        .map(Adaptor::out_dim)
        .ok_or_else(|| CoreError::Config("no adaptors supplied".into()))?;
    if adaptors.values().any(|a| a.out_dim() != d_model) {
        return Err(CoreError::Config("adaptors disagree on output width".into()));
    }
    let mut stream = Array2::<f32>::zeros((layout.len, d_model));
    for track in &layout.tracks {
        let adaptor = adaptors
            .get(&track.adaptor)
            .ok_or_else(|| CoreError::Config(format!("no adaptor for '{}' features", track.adaptor)))?;
        let projected = adaptor.apply(track.rows.view())?;
        let mut target = stream.slice_mut(ndarray::s![track.offset..track.offset + track.rows.nrows(), ..]);
        target += &projected;
    }
    Ok(stream)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FrameRate { kind: FeatureKind, found: f64, expected: f64 },
    DurationMismatch { kind: FeatureKind, frames: usize, expected: usize },
    Dimension { kind: FeatureKind, found: usize, expected: usize },
    NonFinite { kind: FeatureKind, frame: usize },
    TokenRange { frame: usize, token: u32, vocab: usize },
    TokensPerFrame { found: usize, expected: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FrameRate { kind, found, expected } => {
                write!(f, "{kind}: frame rate {found} fps, expected {expected}")
            }
            Violation::DurationMismatch { kind, frames, expected } => {
                write!(f, "{kind}: {frames} frames, duration implies {expected}")
            }
            Violation::Dimension { kind, found, expected } => {
                write!(f, "{kind}: dimension {found}, expected {expected}")
            }
            Violation::NonFinite { kind, frame } => write!(f, "{kind}: non-finite value in frame {frame}"),
            Violation::TokenRange { frame, token, vocab } => {
                write!(f, "visual token {token} in frame {frame} outside [0, {vocab})")
            }
            Violation::TokensPerFrame { found, expected } => {
                write!(f, "{found} visual tokens per frame, expected {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(CoreError::Validation(
                self.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ))
        }
    }
}

/// Lists every invariant violation in `bundle`.
pub fn validate_bundle(bundle: &ConditioningBundle, config: &ConditioningConfig) -> ValidationReport {
    let mut violations = Vec::new();
    let expected_frames = bundle.n_frames(config.frame_rate);
    for f in &bundle.features {
        if (f.frame_rate - config.frame_rate).abs() > 1e-9 {
            violations.push(Violation::FrameRate {
                kind: f.kind,
                found: f.frame_rate,
                expected: config.frame_rate,
            });
        }
        if f.n_frames() != expected_frames {
            violations.push(Violation::DurationMismatch {
                kind: f.kind,
                frames: f.n_frames(),
                expected: expected_frames,
            });
        }
        let expected_dim = config.dim_of(f.kind);
        if f.dim() != expected_dim {
            violations.push(Violation::Dimension {
                kind: f.kind,
                found: f.dim(),
                expected: expected_dim,
            });
        }
        if let Some((frame, _)) = f
            .vectors
            .axis_iter(Axis(0))
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            violations.push(Violation::NonFinite { kind: f.kind, frame });
        }
    }
    if let Some(g) = &bundle.tokens {
        if g.n_frames != expected_frames {
            violations.push(Violation::DurationMismatch {
                kind: FeatureKind::VisualTokens,
                frames: g.n_frames,
                expected: expected_frames,
            });
        }
        if g.tokens_per_frame != config.tokens_per_frame {
            violations.push(Violation::TokensPerFrame {
                found: g.tokens_per_frame,
                expected: config.tokens_per_frame,
            });
        }
        let vocab = g.vocab_size.min(config.token_vocab);
        for (i, &t) in g.tokens.iter().enumerate() {
            if t as usize >= vocab {
                violations.push(Violation::TokenRange {
                    frame: i / g.tokens_per_frame.max(1),
                    token: t,
                    vocab,
                });
            }
        }
    }
    ValidationReport { violations }
}
