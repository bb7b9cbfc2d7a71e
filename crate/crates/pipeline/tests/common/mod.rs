#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtune_core::codec::{AcousticTokenGrid, Codec, CodecConfig};
use vidtune_core::conditioning::{ConditioningBundle, FeatureKind, StyleEmbedding, VisualEmbeddingSequence, STYLE_DIM};
use vidtune_core::datagen::{generate_corpus, PairedClip, SyntheticSpec};
use vidtune_core::semantic::{SemanticConfig, SemanticTokenizer};
use vidtune_pipeline::{
    tokenize_corpus, train_codec, train_semantic, ModelShape, Rates, RunConfig, StageConfig, StageContext, TokenizedClip,
};

/// Small tokenizers and corpus shared by the stage tests.
pub struct Fixture {
    pub cfg: RunConfig,
    pub clips: Vec<PairedClip>,
    pub codec: Codec,
    pub tokenizer: SemanticTokenizer,
    pub tokenized: Vec<TokenizedClip>,
    pub ctx: StageContext,
}

pub fn small_config(n_clips: usize, with_style: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = SyntheticSpec {
        n_clips,
        with_style,
        ..cfg.data
    };
    cfg.codec = CodecConfig {
        vocab_size: 16,
        kmeans_iters: 8,
        max_training_frames: Some(4_000),
        ..cfg.codec
    };
    cfg.semantic = SemanticConfig {
        vocab_size: 16,
        kmeans_iters: 8,
        ..cfg.semantic
    };
    cfg.held_out_clips = 1;
    cfg
}

pub fn fixture(n_clips: usize, with_style: bool) -> Fixture {
    let cfg = small_config(n_clips, with_style);
    let clips = generate_corpus(&cfg.data).unwrap();
    let waves: Vec<_> = clips.iter().map(|c| c.waveform.clone()).collect();
    let codec = train_codec(&cfg, &waves).unwrap();
    let named: Vec<_> = clips.iter().map(|c| (c.clip_id.clone(), c.waveform.clone())).collect();
    let tokenizer = train_semantic(&cfg, &named).unwrap();
    let rates = cfg.rates().unwrap();
    let tokenized = tokenize_corpus(&clips, &codec, &tokenizer, &rates).unwrap();
    let ctx = context(&cfg, &tokenized, tokenizer.vocab_size());
    Fixture {
        cfg,
        clips,
        codec,
        tokenizer,
        tokenized,
        ctx,
    }
}

pub fn context(cfg: &RunConfig, clips: &[TokenizedClip], semantic_vocab: usize) -> StageContext {
    StageContext {
        rates: cfg.rates().unwrap(),
        semantic_vocab,
        acoustic_vocab: cfg.codec.vocab_size,
        n_coarse: cfg.codec.n_coarse,
        n_fine: cfg.codec.n_fine,
        conditioning: cfg.conditioning.clone(),
        visual_inputs: StageContext::visual_inputs_for(clips, &cfg.conditioning),
    }
}

pub fn tiny_stage(base: StageConfig, steps: usize) -> StageConfig {
    StageConfig {
        model: ModelShape {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            relative_position_buckets: 16,
            relative_max_distance: 64,
        },
        steps,
        batch_size: 4,
        ..base
    }
}

/// Random token streams for a clip of `seconds` at `rates`, without
/// tokenizers; visual features are 4-d clip-like frames.
pub fn fake_clip(rates: &Rates, seconds: usize, ks: usize, ka: usize, levels: usize, visual: bool, style: bool, seed: u64) -> TokenizedClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let semantic = (0..seconds * rates.semantic).map(|_| rng.random_range(0..ks as u32)).collect();
    let frames = seconds * rates.acoustic;
    let acoustic = AcousticTokenGrid::new(
        (0..frames * levels).map(|_| rng.random_range(0..ka as u32)).collect(),
        frames,
        levels,
        ka,
    )
    .unwrap();
    let features = if visual {
        let v = Array2::from_shape_fn((seconds * rates.visual, 4), |_| rng.random::<f32>());
        vec![VisualEmbeddingSequence::new(FeatureKind::ClipLike, v, rates.visual as f64)]
    } else {
        Vec::new()
    };
    let style = style.then(|| StyleEmbedding::new((0..STYLE_DIM).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap());
    TokenizedClip {
        clip_id: format!("fake{seed}"),
        duration_s: seconds,
        bundle: ConditioningBundle {
            features,
            tokens: None,
            style,
            duration_s: seconds as f64,
        },
        semantic,
        acoustic,
        labels: None,
    }
}

pub fn fake_context(rates: Rates, ks: usize, ka: usize, n_coarse: usize, n_fine: usize, style: bool) -> StageContext {
    let conditioning = vidtune_core::conditioning::ConditioningConfig {
        clip_dim: 4,
        ..Default::default()
    };
    let probe = fake_clip(&rates, 1, ks, ka, n_coarse + n_fine, true, style, 0);
    StageContext {
        rates,
        semantic_vocab: ks,
        acoustic_vocab: ka,
        n_coarse,
        n_fine,
        visual_inputs: StageContext::visual_inputs_for(&[probe], &conditioning),
        conditioning,
    }
}
