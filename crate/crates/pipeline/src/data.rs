//! Token-level view of a corpus: each clip tokenized once, then cropped.
//!
//! Acoustic tokens are frame-local and semantic tokens are computed with
//! whole-clip normalization, so cropping the token streams of a clip is the
//! same as slicing a tokenization of the whole clip.

use rayon::prelude::*;
use vidtune_core::codec::{AcousticTokenGrid, Codec};
use vidtune_core::conditioning::ConditioningBundle;
use vidtune_core::datagen::{PairedClip, SyntheticLabels};
use vidtune_core::semantic::{embedder_registry, train_semantic_codebook, SemanticTokenizer};
use vidtune_core::{CoreError, Result, Waveform};

use crate::config::{Rates, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedClip {
    pub clip_id: String,
    /// Whole seconds covered by every stream.
    pub duration_s: usize,
    pub bundle: ConditioningBundle,
    pub semantic: Vec<u32>,
    pub acoustic: AcousticTokenGrid,
    pub labels: Option<SyntheticLabels>,
}

impl TokenizedClip {
    /// True when the clip carries per-frame visual conditioning.
    pub fn is_paired(&self) -> bool {
        !self.bundle.features.is_empty() || self.bundle.tokens.is_some()
    }

    /// Seconds `[start_s, start_s + seconds)` of every stream.
    pub fn crop(&self, start_s: usize, seconds: usize, rates: &Rates) -> Result<Self> {
        if start_s + seconds > self.duration_s {
            return Err(CoreError::Dataset(format!(
                "{}: crop [{start_s}, {}) s exceeds {} s",
                self.clip_id,
                start_s + seconds,
                self.duration_s
            )));
        }
        let bundle = self
            .bundle
            .crop_frames(start_s * rates.visual, seconds * rates.visual, rates.visual as f64)?;
        Ok(Self {
            clip_id: self.clip_id.clone(),
            duration_s: seconds,
            bundle,
            semantic: self.semantic[start_s * rates.semantic..(start_s + seconds) * rates.semantic].to_vec(),
            acoustic: self
                .acoustic
                .slice_frames(start_s * rates.acoustic, seconds * rates.acoustic)?,
            labels: self.labels.clone(),
        })
    }
}

/// Trains the acoustic codec on every waveform.
pub fn train_codec(config: &RunConfig, waveforms: &[Waveform]) -> Result<Codec> {
    Codec::train(config.codec.clone(), waveforms, config.codec_seed)
}

/// Fits the semantic codebook on frame embeddings of every clip.
pub fn train_semantic(config: &RunConfig, clips: &[(String, Waveform)]) -> Result<SemanticTokenizer> {
    let registry = embedder_registry();
    let embedder = registry.create(&config.semantic.embedder, &config.semantic)?;
    let sequences = clips
        .par_iter()
        .map(|(id, w)| embedder.embed(id, w))
        .collect::<Result<Vec<_>>>()?;
    let codebook = train_semantic_codebook(
        &sequences,
        config.semantic.vocab_size,
        config.semantic_seed,
        config.semantic.kmeans_iters,
    )?;
    SemanticTokenizer::new(embedder, codebook)
}

/// Tokenizes one clip, truncating every stream to whole seconds.
pub fn tokenize_clip(clip: &PairedClip, codec: &Codec, tokenizer: &SemanticTokenizer, rates: &Rates) -> Result<TokenizedClip> {
    let duration_s = (clip.waveform.duration_s() + 1e-9).floor() as usize;
    if duration_s == 0 {
        return Err(CoreError::Dataset(format!("{}: shorter than one second", clip.clip_id)));
    }
    let semantic = tokenizer.tokenize(&clip.clip_id, &clip.waveform)?.tokens;
    let need_s = duration_s * rates.semantic;
    if semantic.len() < need_s {
        return Err(CoreError::Dataset(format!(
            "{}: {} semantic tokens for {duration_s} s",
            clip.clip_id,
            semantic.len()
        )));
    }
    let grid = codec.encode(&clip.waveform)?;
    let acoustic = grid.slice_frames(0, duration_s * rates.acoustic)?;
    let bundle = clip
        .bundle
        .crop_frames(0, duration_s * rates.visual, rates.visual as f64)?;
    Ok(TokenizedClip {
        clip_id: clip.clip_id.clone(),
        duration_s,
        bundle,
        semantic: semantic[..need_s].to_vec(),
        acoustic,
        labels: clip.labels.clone(),
    })
}

pub fn tokenize_corpus(clips: &[PairedClip], codec: &Codec, tokenizer: &SemanticTokenizer, rates: &Rates) -> Result<Vec<TokenizedClip>> {
    clips.par_iter().map(|c| tokenize_clip(c, codec, tokenizer, rates)).collect()
}
