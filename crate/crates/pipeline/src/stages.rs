//! The modeling stages as interchangeable strategies.
//!
//! A strategy fixes how a cropped clip becomes a teacher-forcing example and
//! how the stage's tokens are sampled at generation time. Positions are time
//! stamps: semantic frames for the semantic stages and acoustic frames for
//! the acoustic ones, so that tokens describing the same instant sit at
//! relative distance zero whatever their place in the sequence.

use ndarray::Array2;
use vidtune_core::codec::AcousticTokenGrid;
use vidtune_core::conditioning::{ConditioningBundle, ConditioningConfig, StreamLayout, STYLE_ADAPTOR, STYLE_DIM};
use vidtune_core::registry::Registry;
use vidtune_core::{CoreError, Result};
use vidtune_seqmodel::{Architecture, EncoderInput, EncoderInputSpec, Example, ModelWeights, SamplingParams, TransformerConfig};

use crate::config::{ModelShape, Rates};
use crate::data::TokenizedClip;
use crate::flatten::{flatten_grid, flatten_with_offset, level_range, unflatten_with_offset};

/// Adaptor name of the semantic-token track in stage-2B encoders.
pub const SEMANTIC_ADAPTOR: &str = "semantic";

/// Which tokens a stage produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Semantic,
    Coarse,
    Fine,
}

/// Corpus-wide facts every stage needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageContext {
    pub rates: Rates,
    pub semantic_vocab: usize,
    pub acoustic_vocab: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub conditioning: ConditioningConfig,
    /// Visual adaptors (feature kinds and optionally style) for encoders.
    pub visual_inputs: Vec<EncoderInputSpec>,
}

impl StageContext {
    /// Declares one visual adaptor per feature kind seen in `clips`, plus a
    /// style adaptor when any clip carries a style vector.
    pub fn visual_inputs_for(clips: &[TokenizedClip], conditioning: &ConditioningConfig) -> Vec<EncoderInputSpec> {
        let mut kinds: Vec<_> = clips.iter().flat_map(|c| c.bundle.kinds()).collect();
        kinds.sort_by_key(|k| k.as_str());
        kinds.dedup();
        let mut inputs: Vec<EncoderInputSpec> = kinds
            .into_iter()
            .map(|k| EncoderInputSpec {
                name: k.as_str().into(),
                dim: conditioning.dim_of(k),
            })
            .collect();
        if clips.iter().any(|c| c.bundle.style.is_some()) {
            inputs.push(EncoderInputSpec {
                name: STYLE_ADAPTOR.into(),
                dim: STYLE_DIM,
            });
        }
        inputs
    }
}

/// Inputs and outputs threaded through the stages during generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    pub bundle: ConditioningBundle,
    pub duration_s: usize,
    pub semantic: Option<Vec<u32>>,
    pub coarse: Option<AcousticTokenGrid>,
    pub fine: Option<AcousticTokenGrid>,
}

impl GenerationState {
    pub fn new(bundle: ConditioningBundle, duration_s: usize) -> Self {
        Self {
            bundle,
            duration_s,
            semantic: None,
            coarse: None,
            fine: None,
        }
    }
}

pub trait StageStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn role(&self) -> Role;

    fn architecture(&self) -> Architecture;

    fn vocab_size(&self, ctx: &StageContext) -> usize;

    fn encoder_inputs(&self, _ctx: &StageContext) -> Vec<EncoderInputSpec> {
        Vec::new()
    }

    fn decoder_bidirectional(&self) -> bool {
        false
    }

    /// Decoder and encoder lengths of a `seconds`-long crop.
    fn lengths(&self, ctx: &StageContext, seconds: usize) -> (usize, usize);

    /// Teacher-forcing example for an already cropped clip.
    fn example(&self, ctx: &StageContext, clip: &TokenizedClip) -> Result<Example>;

    /// Samples this stage's tokens into `state`. `window_s` is the training
    /// crop length; stages that generate piecewise use it as the window.
    fn generate(
        &self,
        ctx: &StageContext,
        weights: &ModelWeights<f32>,
        state: &mut GenerationState,
        temperature: f64,
        seed: u64,
        window_s: usize,
    ) -> Result<()>;
}

/// Model configuration of `strategy` at `shape` for `crop_seconds` crops.
pub fn transformer_config(strategy: &dyn StageStrategy, ctx: &StageContext, shape: &ModelShape, crop_seconds: usize) -> TransformerConfig {
    let (max_len, max_encoder_len) = strategy.lengths(ctx, crop_seconds);
    TransformerConfig {
        architecture: strategy.architecture(),
        n_layers: shape.n_layers,
        n_heads: shape.n_heads,
        d_model: shape.d_model,
        d_ff: shape.d_ff,
        vocab_size: strategy.vocab_size(ctx),
        max_len,
        relative_position_buckets: shape.relative_position_buckets,
        relative_max_distance: shape.relative_max_distance,
        decoder_bidirectional: strategy.decoder_bidirectional(),
        encoder_inputs: strategy.encoder_inputs(ctx),
        max_encoder_len: max_encoder_len.max(1),
    }
}

/// Checks that trained weights fit `strategy` under `ctx`.
pub fn check_compatible(strategy: &dyn StageStrategy, ctx: &StageContext, weights: &ModelWeights<f32>) -> Result<()> {
    let c = &weights.config;
    let vocab = strategy.vocab_size(ctx);
    if c.vocab_size != vocab {
        return Err(CoreError::Config(format!(
            "stage '{}' checkpoint has vocabulary {}, the tokenizers imply {vocab}",
            strategy.name(),
            c.vocab_size
        )));
    }
    if c.architecture != strategy.architecture() {
        return Err(CoreError::Config(format!(
            "stage '{}' checkpoint is {:?}, expected {:?}",
            strategy.name(),
            c.architecture,
            strategy.architecture()
        )));
    }
    if strategy.architecture() == Architecture::EncoderDecoder && strategy.role() == Role::Coarse {
        let sem = c.encoder_inputs.iter().find(|s| s.name == SEMANTIC_ADAPTOR);
        if sem.map(|s| s.dim) != Some(ctx.semantic_vocab) {
            return Err(CoreError::Config(format!(
                "stage '{}' checkpoint expects a different semantic vocabulary",
                strategy.name()
            )));
        }
    }
    Ok(())
}

/// Independent stream of seeds for sub-task `k` of `seed`.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Visual stream of `bundle` with frame times in units of `per_second`.
fn visual_encoder(ctx: &StageContext, bundle: &ConditioningBundle, per_second: usize, clip_id: &str) -> Result<EncoderInput> {
    if bundle.features.is_empty() && bundle.tokens.is_none() {
        return Err(CoreError::Dataset(format!("{clip_id}: no visual features for a visually conditioned stage")));
    }
    let layout = StreamLayout::from_bundle(bundle, &ctx.conditioning)?;
    let offset = usize::from(bundle.style.is_some());
    let times = (0..layout.len)
        .map(|p| (p >= offset).then(|| ctx.rates.visual_time(p - offset, per_second)))
        .collect();
    Ok(EncoderInput { layout, times })
}

fn one_hot(tokens: &[u32], vocab: usize) -> Array2<f32> {
    let mut m = Array2::zeros((tokens.len(), vocab));
    for (i, &t) in tokens.iter().enumerate() {
        m[[i, t as usize]] = 1.0;
    }
    m
}

fn visual_specs(ctx: &StageContext) -> Vec<EncoderInputSpec> {
    ctx.visual_inputs.clone()
}

fn require<'a, T>(v: &'a Option<T>, what: &str, stage: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| CoreError::State(format!("stage '{stage}' needs {what}, which no earlier stage produced")))
}

fn visual_len(ctx: &StageContext, seconds: usize) -> usize {
    let style = usize::from(ctx.visual_inputs.iter().any(|s| s.name == STYLE_ADAPTOR));
    style + seconds * ctx.rates.visual
}

fn params(temperature: f64, seed: u64, n: usize) -> SamplingParams {
    SamplingParams {
        temperature,
        seed,
        max_new_tokens: n,
    }
}

fn conditioning_crop(state: &GenerationState, ctx: &StageContext) -> Result<ConditioningBundle> {
    let need = state.duration_s * ctx.rates.visual;
    let have = state.bundle.n_frames(ctx.rates.visual as f64);
    if have < need {
        return Err(CoreError::Validation(format!(
            "conditioning covers {have} frames, generating {} s needs {need}",
            state.duration_s
        )));
    }
    state.bundle.crop_frames(0, need, ctx.rates.visual as f64)
}

/// Visual features to semantic tokens (encoder-decoder).
pub struct SemanticFromVisual;

impl StageStrategy for SemanticFromVisual {
    fn name(&self) -> &'static str {
        "1"
    }

    fn role(&self) -> Role {
        Role::Semantic
    }

    fn architecture(&self) -> Architecture {
        Architecture::EncoderDecoder
    }

    fn vocab_size(&self, ctx: &StageContext) -> usize {
        ctx.semantic_vocab
    }

    fn encoder_inputs(&self, ctx: &StageContext) -> Vec<EncoderInputSpec> {
        visual_specs(ctx)
    }

    fn lengths(&self, ctx: &StageContext, seconds: usize) -> (usize, usize) {
        (seconds * ctx.rates.semantic, visual_len(ctx, seconds))
    }

    fn example(&self, ctx: &StageContext, clip: &TokenizedClip) -> Result<Example> {
        let enc = visual_encoder(ctx, &clip.bundle, ctx.rates.semantic, &clip.clip_id)?;
        Ok(Example::new(Some(enc), clip.semantic.clone()))
    }

    fn generate(&self, ctx: &StageContext, w: &ModelWeights<f32>, state: &mut GenerationState, temperature: f64, seed: u64, _window_s: usize) -> Result<()> {
        let bundle = conditioning_crop(state, ctx)?;
        let enc = visual_encoder(ctx, &bundle, ctx.rates.semantic, "conditioning")?;
        let n = state.duration_s * ctx.rates.semantic;
        state.semantic = Some(w.sample(Some(&enc), &[], None, &params(temperature, seed, n), None)?);
        Ok(())
    }
}

/// Semantic tokens with no conditioning; the reference point for how much
/// the visual encoder helps.
pub struct UnconditionalSemantic;

impl StageStrategy for UnconditionalSemantic {
    fn name(&self) -> &'static str {
        "1-unconditional"
    }

    fn role(&self) -> Role {
        Role::Semantic
    }

    fn architecture(&self) -> Architecture {
        Architecture::DecoderOnly
    }

    fn vocab_size(&self, ctx: &StageContext) -> usize {
        ctx.semantic_vocab
    }

    fn lengths(&self, ctx: &StageContext, seconds: usize) -> (usize, usize) {
        (seconds * ctx.rates.semantic, 0)
    }

    fn example(&self, _ctx: &StageContext, clip: &TokenizedClip) -> Result<Example> {
        Ok(Example::new(None, clip.semantic.clone()))
    }

    fn generate(&self, ctx: &StageContext, w: &ModelWeights<f32>, state: &mut GenerationState, temperature: f64, seed: u64, _window_s: usize) -> Result<()> {
        let n = state.duration_s * ctx.rates.semantic;
        state.semantic = Some(w.sample(None, &[], None, &params(temperature, seed, n), None)?);
        Ok(())
    }
}

/// Semantic tokens followed by the flattened coarse grid in one decoder-only
/// sequence; coarse ids are shifted past the semantic vocabulary and only the
/// coarse span is scored. Trainable on audio alone.
pub struct CoarseFromSemantic;

impl CoarseFromSemantic {
    fn positions(ctx: &StageContext, n_semantic: usize, n_frames: usize) -> Vec<i64> {
        (0..n_semantic)
            .map(|t| ctx.rates.semantic_time(t))
            .chain((0..n_frames * ctx.n_coarse).map(|i| (i / ctx.n_coarse) as i64))
            .collect()
    }
}

impl StageStrategy for CoarseFromSemantic {
    fn name(&self) -> &'static str {
        "2a"
    }

    fn role(&self) -> Role {
        Role::Coarse
    }

    fn architecture(&self) -> Architecture {
        Architecture::DecoderOnly
    }

    fn vocab_size(&self, ctx: &StageContext) -> usize {
        ctx.semantic_vocab + ctx.n_coarse * ctx.acoustic_vocab
    }

    fn decoder_bidirectional(&self) -> bool {
        true
    }

    fn lengths(&self, ctx: &StageContext, seconds: usize) -> (usize, usize) {
        (seconds * (ctx.rates.semantic + ctx.rates.acoustic * ctx.n_coarse), 0)
    }

    fn example(&self, ctx: &StageContext, clip: &TokenizedClip) -> Result<Example> {
        let coarse = clip.acoustic.select_levels(0..ctx.n_coarse)?;
        let shift = ctx.semantic_vocab as u32;
        let mut tokens = clip.semantic.clone();
        tokens.extend(flatten_grid(&coarse).into_iter().map(|t| t + shift));
        Ok(Example {
            encoder: None,
            positions: Some(Self::positions(ctx, clip.semantic.len(), coarse.n_frames())),
            loss_from: clip.semantic.len(),
            tokens,
        })
    }

    fn generate(&self, ctx: &StageContext, w: &ModelWeights<f32>, state: &mut GenerationState, temperature: f64, seed: u64, _window_s: usize) -> Result<()> {
        let semantic = require(&state.semantic, "semantic tokens", self.name())?;
        let frames = state.duration_s * ctx.rates.acoustic;
        let positions = Self::positions(ctx, semantic.len(), frames);
        let (ks, ka, nc) = (ctx.semantic_vocab, ctx.acoustic_vocab, ctx.n_coarse);
        let n_sem = semantic.len();
        let allowed = move |slot: usize| level_range(ks, (slot - n_sem) % nc, ka);
        let flat = w.sample(None, semantic, Some(&positions), &params(temperature, seed, frames * nc), Some(&allowed))?;
        let flat: Vec<u32> = flat.into_iter().map(|t| t - ks as u32).collect();
        state.coarse = Some(unflatten_with_offset(&flat, nc, ka, 0)?);
        Ok(())
    }
}

/// Encoder over the visual stream followed by the semantic tokens (one-hot
/// rows through a learned adaptor); the decoder emits the flattened coarse grid.
pub struct CoarseFromVisualAndSemantic;

impl CoarseFromVisualAndSemantic {
    fn encoder(ctx: &StageContext, bundle: &ConditioningBundle, semantic: &[u32], clip_id: &str) -> Result<EncoderInput> {
        if bundle.features.is_empty() && bundle.tokens.is_none() {
            return Err(CoreError::Config(format!(
                "{clip_id}: stage '2b' needs paired visual features; use '2a' for audio-only data"
            )));
        }
        let mut enc = visual_encoder(ctx, bundle, ctx.rates.acoustic, clip_id)?;
        enc.layout.push_back(SEMANTIC_ADAPTOR, one_hot(semantic, ctx.semantic_vocab));
        enc.times.extend((0..semantic.len()).map(|t| Some(ctx.rates.semantic_time(t))));
        Ok(enc)
    }

    fn positions(ctx: &StageContext, frames: usize) -> Vec<i64> {
        (0..frames * ctx.n_coarse).map(|i| (i / ctx.n_coarse) as i64).collect()
    }
}

impl StageStrategy for CoarseFromVisualAndSemantic {
    fn name(&self) -> &'static str {
        "2b"
    }

    fn role(&self) -> Role {
        Role::Coarse
    }

    fn architecture(&self) -> Architecture {
        Architecture::EncoderDecoder
    }

    fn vocab_size(&self, ctx: &StageContext) -> usize {
        ctx.n_coarse * ctx.acoustic_vocab
    }

    fn encoder_inputs(&self, ctx: &StageContext) -> Vec<EncoderInputSpec> {
        let mut specs = visual_specs(ctx);
        specs.push(EncoderInputSpec {
            name: SEMANTIC_ADAPTOR.into(),
            dim: ctx.semantic_vocab,
        });
        specs
    }

    fn lengths(&self, ctx: &StageContext, seconds: usize) -> (usize, usize) {
        (
            seconds * ctx.rates.acoustic * ctx.n_coarse,
            visual_len(ctx, seconds) + seconds * ctx.rates.semantic,
        )
    }

    fn example(&self, ctx: &StageContext, clip: &TokenizedClip) -> Result<Example> {
        let coarse = clip.acoustic.select_levels(0..ctx.n_coarse)?;
        let enc = Self::encoder(ctx, &clip.bundle, &clip.semantic, &clip.clip_id)?;
        Ok(Example {
            encoder: Some(enc),
            positions: Some(Self::positions(ctx, coarse.n_frames())),
            loss_from: 0,
            tokens: flatten_grid(&coarse),
        })
    }

    fn generate(&self, ctx: &StageContext, w: &ModelWeights<f32>, state: &mut GenerationState, temperature: f64, seed: u64, _window_s: usize) -> Result<()> {
        let semantic = require(&state.semantic, "semantic tokens", self.name())?;
        let bundle = conditioning_crop(state, ctx)?;
        let enc = Self::encoder(ctx, &bundle, semantic, "conditioning")?;
        let frames = state.duration_s * ctx.rates.acoustic;
        let (ka, nc) = (ctx.acoustic_vocab, ctx.n_coarse);
        let allowed = move |slot: usize| level_range(0, slot % nc, ka);
        let flat = w.sample(
            Some(&enc),
            &[],
            Some(&Self::positions(ctx, frames)),
            &params(temperature, seed, frames * nc),
            Some(&allowed),
        )?;
        state.coarse = Some(unflatten_with_offset(&flat, nc, ka, 0)?);
        Ok(())
    }
}

/// Flattened coarse grid followed by the flattened fine grid; fine ids use
/// absolute level offsets and only the fine span is scored.
pub struct FineFromCoarse;

impl FineFromCoarse {
    fn positions(ctx: &StageContext, frames: usize) -> Vec<i64> {
        let coarse = (0..frames * ctx.n_coarse).map(|i| (i / ctx.n_coarse) as i64);
        let fine = (0..frames * ctx.n_fine).map(|i| (i / ctx.n_fine) as i64);
        coarse.chain(fine).collect()
    }

    /// Fine levels of a window given its coarse levels.
    fn window(
        ctx: &StageContext,
        w: &ModelWeights<f32>,
        coarse: &AcousticTokenGrid,
        temperature: f64,
        seed: u64,
    ) -> Result<AcousticTokenGrid> {
        let frames = coarse.n_frames();
        let (ka, nc, nf) = (ctx.acoustic_vocab, ctx.n_coarse, ctx.n_fine);
        let prefix = flatten_grid(coarse);
        let n_prefix = prefix.len();
        let allowed = move |slot: usize| level_range(0, nc + (slot - n_prefix) % nf, ka);
        let flat = w.sample(
            None,
            &prefix,
            Some(&Self::positions(ctx, frames)),
            &params(temperature, seed, frames * nf),
            Some(&allowed),
        )?;
        unflatten_with_offset(&flat, nf, ka, nc)
    }
}

impl StageStrategy for FineFromCoarse {
    fn name(&self) -> &'static str {
        "3"
    }

    fn role(&self) -> Role {
        Role::Fine
    }

    fn architecture(&self) -> Architecture {
        Architecture::DecoderOnly
    }

    fn vocab_size(&self, ctx: &StageContext) -> usize {
        (ctx.n_coarse + ctx.n_fine) * ctx.acoustic_vocab
    }

    fn decoder_bidirectional(&self) -> bool {
        true
    }

    fn lengths(&self, ctx: &StageContext, seconds: usize) -> (usize, usize) {
        (seconds * ctx.rates.acoustic * (ctx.n_coarse + ctx.n_fine), 0)
    }

    fn example(&self, ctx: &StageContext, clip: &TokenizedClip) -> Result<Example> {
        let coarse = clip.acoustic.select_levels(0..ctx.n_coarse)?;
        let fine = clip.acoustic.select_levels(ctx.n_coarse..ctx.n_coarse + ctx.n_fine)?;
        let mut tokens = flatten_grid(&coarse);
        let loss_from = tokens.len();
        tokens.extend(flatten_with_offset(&fine, ctx.n_coarse));
        Ok(Example {
            encoder: None,
            positions: Some(Self::positions(ctx, coarse.n_frames())),
            loss_from,
            tokens,
        })
    }

    fn generate(&self, ctx: &StageContext, w: &ModelWeights<f32>, state: &mut GenerationState, temperature: f64, seed: u64, window_s: usize) -> Result<()> {
        let coarse = require(&state.coarse, "coarse tokens", self.name())?;
        let step = window_s.max(1) * ctx.rates.acoustic;
        let mut fine: Option<AcousticTokenGrid> = None;
        for (k, start) in (0..coarse.n_frames()).step_by(step).enumerate() {
            let len = step.min(coarse.n_frames() - start);
            let part = Self::window(ctx, w, &coarse.slice_frames(start, len)?, temperature, derive_seed(seed, k as u64))?;
            fine = Some(match fine {
                None => part,
                Some(f) => f.append_frames(&part)?,
            });
        }
        state.fine = Some(fine.ok_or_else(|| CoreError::State("no coarse frames to refine".into()))?);
        Ok(())
    }
}

/// Every stage strategy, by name.
pub fn stage_registry() -> Registry<dyn StageStrategy> {
    let mut reg: Registry<dyn StageStrategy> = Registry::new("stage");
    reg.register("1", "visual features to semantic tokens", |_| Ok(Box::new(SemanticFromVisual)));
    reg.register("1-unconditional", "semantic tokens without conditioning", |_| {
        Ok(Box::new(UnconditionalSemantic))
    });
    reg.register("2a", "semantic to coarse tokens, decoder-only, audio-only training", |_| {
        Ok(Box::new(CoarseFromSemantic))
    });
    reg.register("2b", "visual features and semantic tokens to coarse tokens", |_| {
        Ok(Box::new(CoarseFromVisualAndSemantic))
    });
    reg.register("3", "coarse to fine acoustic tokens over short windows", |_| Ok(Box::new(FineFromCoarse)));
    reg
}
