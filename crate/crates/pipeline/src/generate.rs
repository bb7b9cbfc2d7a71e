//! End-to-end generation: conditioning to semantic, coarse and fine tokens,
//! then waveform.

use vidtune_core::codec::Codec;
use vidtune_core::conditioning::ConditioningBundle;
use vidtune_core::{CoreError, Result, Waveform};
use vidtune_seqmodel::ModelWeights;

use crate::config::StageConfig;
use crate::stages::{check_compatible, derive_seed, GenerationState, Role, StageContext, StageStrategy};

/// A trained stage with its sampling settings.
pub struct StageModel {
    pub strategy: Box<dyn StageStrategy>,
    pub weights: ModelWeights<f32>,
    pub temperature: f64,
    pub window_s: usize,
}

impl StageModel {
    pub fn new(strategy: Box<dyn StageStrategy>, weights: ModelWeights<f32>, config: &StageConfig) -> Self {
        Self {
            strategy,
            weights,
            temperature: config.temperature,
            window_s: config.crop_seconds,
        }
    }
}

pub struct Generator {
    pub ctx: StageContext,
    pub codec: Codec,
    pub sample_rate: u32,
    stages: [StageModel; 3],
}

impl Generator {
    /// Checks that the three stages produce semantic, coarse and fine tokens
    /// in that order and agree with the tokenizers' vocabularies.
    pub fn new(ctx: StageContext, codec: Codec, sample_rate: u32, stages: [StageModel; 3]) -> Result<Self> {
        if !codec.is_trained() {
            return Err(CoreError::State("generation needs a trained codec".into()));
        }
        for (stage, role) in stages.iter().zip([Role::Semantic, Role::Coarse, Role::Fine]) {
            if stage.strategy.role() != role {
                return Err(CoreError::Config(format!(
                    "stage '{}' produces {:?} tokens where {role:?} tokens are needed",
                    stage.strategy.name(),
                    stage.strategy.role()
                )));
            }
            check_compatible(stage.strategy.as_ref(), &ctx, &stage.weights)?;
        }
        let cc = codec.config();
        if cc.vocab_size != ctx.acoustic_vocab || cc.n_coarse != ctx.n_coarse || cc.n_fine != ctx.n_fine {
            return Err(CoreError::Config("codec levels or vocabulary differ from the stage context".into()));
        }
        Ok(Self {
            ctx,
            codec,
            sample_rate,
            stages,
        })
    }

    pub fn stage(&self, i: usize) -> &StageModel {
        &self.stages[i]
    }

    /// Runs the three stages; stage `i` samples with `derive_seed(seed, i)`.
    pub fn generate_tokens(&self, bundle: &ConditioningBundle, duration_s: usize, seed: u64) -> Result<GenerationState> {
        let longest = self.stages[0].window_s.min(self.stages[1].window_s);
        if duration_s == 0 || duration_s > longest {
            return Err(CoreError::Validation(format!(
                "duration must be 1..={longest} s, got {duration_s}"
            )));
        }
        let mut state = GenerationState::new(bundle.clone(), duration_s);
        for (i, s) in self.stages.iter().enumerate() {
            s.strategy
                .generate(&self.ctx, &s.weights, &mut state, s.temperature, derive_seed(seed, i as u64), s.window_s)?;
        }
        Ok(state)
    }

    pub fn decode(&self, state: &GenerationState) -> Result<Waveform> {
        let missing = || CoreError::State("token grids are incomplete".into());
        let coarse = state.coarse.as_ref().ok_or_else(missing)?;
        let fine = state.fine.as_ref().ok_or_else(missing)?;
        let grid = coarse.concat_levels(fine)?;
        let len = state.duration_s * self.sample_rate as usize;
        self.codec
            .decode_to_length(&grid, self.codec.config().n_levels, self.sample_rate, len)
    }

    /// `duration_s * sample_rate` samples of audio for `bundle`.
    pub fn generate(&self, bundle: &ConditioningBundle, duration_s: usize, seed: u64) -> Result<Waveform> {
        self.decode(&self.generate_tokens(bundle, duration_s, seed)?)
    }
}
