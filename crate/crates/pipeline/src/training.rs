//! Stage training over random whole-second crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtune_core::{CoreError, Result};
use vidtune_seqmodel::{evaluate_loss, train_step, Adam, Example, ModelWeights, StepStats};

use crate::config::StageConfig;
use crate::data::TokenizedClip;
use crate::stages::{derive_seed, transformer_config, StageContext, StageStrategy};

fn check_durations(clips: &[TokenizedClip], crop_seconds: usize) -> Result<()> {
    if clips.is_empty() {
        return Err(CoreError::Dataset("no clips to train on".into()));
    }
    match clips.iter().find(|c| c.duration_s < crop_seconds) {
        Some(c) => Err(CoreError::Dataset(format!(
            "{}: {} s is shorter than the {crop_seconds} s crop",
            c.clip_id, c.duration_s
        ))),
        None => Ok(()),
    }
}

/// Uniform whole-second crop start for a clip of `duration_s`.
pub fn crop_start(duration_s: usize, crop_seconds: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(0..=duration_s - crop_seconds)
}

/// `batch_size` examples from clips drawn with replacement, each cropped at
/// a uniform whole-second offset.
pub fn sample_batch(
    strategy: &dyn StageStrategy,
    ctx: &StageContext,
    clips: &[TokenizedClip],
    crop_seconds: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Example>> {
    (0..batch_size)
        .map(|_| {
            let clip = &clips[rng.random_range(0..clips.len())];
            let start = crop_start(clip.duration_s, crop_seconds, rng);
            strategy.example(ctx, &clip.crop(start, crop_seconds, &ctx.rates)?)
        })
        .collect()
}

/// One example per clip at a seeded crop offset, for held-out scoring.
pub fn fixed_examples(
    strategy: &dyn StageStrategy,
    ctx: &StageContext,
    clips: &[TokenizedClip],
    crop_seconds: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    check_durations(clips, crop_seconds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clips
        .iter()
        .map(|clip| {
            let start = crop_start(clip.duration_s, crop_seconds, &mut rng);
            strategy.example(ctx, &clip.crop(start, crop_seconds, &ctx.rates)?)
        })
        .collect()
}

/// Mean per-token cross-entropy of `weights` on one crop of every clip.
pub fn held_out_loss(
    strategy: &dyn StageStrategy,
    ctx: &StageContext,
    weights: &ModelWeights<f32>,
    clips: &[TokenizedClip],
    crop_seconds: usize,
    seed: u64,
) -> Result<f64> {
    evaluate_loss(weights, &fixed_examples(strategy, ctx, clips, crop_seconds, seed)?)
}

/// Freshly initialised weights for `strategy` under `config`.
pub fn init_stage(strategy: &dyn StageStrategy, ctx: &StageContext, config: &StageConfig) -> Result<ModelWeights<f32>> {
    let tc = transformer_config(strategy, ctx, &config.model, config.crop_seconds);
    ModelWeights::init(&tc, derive_seed(config.seed, 0))
}

/// Trains `strategy` for `config.steps` Adam steps, reporting every step.
pub fn train_stage(
    strategy: &dyn StageStrategy,
    ctx: &StageContext,
    clips: &[TokenizedClip],
    config: &StageConfig,
    mut on_step: impl FnMut(&StepStats),
) -> Result<ModelWeights<f32>> {
    check_durations(clips, config.crop_seconds)?;
    let mut weights = init_stage(strategy, ctx, config)?;
    let mut opt = Adam::new(&weights, config.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    for _ in 0..config.steps {
        let batch = sample_batch(strategy, ctx, clips, config.crop_seconds, config.batch_size, &mut rng)?;
        let stats = train_step(&mut weights, &batch, &mut opt)?;
        on_step(&stats);
    }
    Ok(weights)
}
