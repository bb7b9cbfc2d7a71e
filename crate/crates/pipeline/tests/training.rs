mod common;

use common::{fixture, tiny_stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtune_core::codec::Codec;
use vidtune_core::CoreError;
use vidtune_pipeline::stages::GenerationState;
use vidtune_pipeline::training::crop_start;
use vidtune_pipeline::{held_out_loss, init_stage, stage_registry, train_stage, StageConfig};

/// Upper 1% point of the chi-square distribution with 50 degrees of freedom.
const CHI2_50_P01: f64 = 76.154;

#[test]
fn crop_starts_are_uniform_over_whole_seconds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000;
    let mut counts = [0usize; 51];
    for _ in 0..draws {
        counts[crop_start(60, 10, &mut rng)] += 1;
    }
    let expected = draws as f64 / 51.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_50_P01, "chi-square {chi2}");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..100).all(|_| crop_start(10, 10, &mut rng) == 0));
}

#[test]
fn training_is_reproducible_and_rejects_short_clips() {
    let fx = fixture(4, false);
    let s = stage_registry().create("1", &()).unwrap();
    let cfg = tiny_stage(StageConfig::stage1(), 3);
    let a = train_stage(s.as_ref(), &fx.ctx, &fx.tokenized, &cfg, |_| {}).unwrap();
    let b = train_stage(s.as_ref(), &fx.ctx, &fx.tokenized, &cfg, |_| {}).unwrap();
    assert_eq!(a, b);
    let long = StageConfig {
        crop_seconds: 11,
        ..cfg
    };
    let err = train_stage(s.as_ref(), &fx.ctx, &fx.tokenized, &long, |_| {}).unwrap_err();
    assert!(matches!(err, CoreError::Dataset(_)));
}

#[test]
fn stage2a_learns_coarse_tokens_from_audio_alone() {
    let mut fx = fixture(10, false);
    // Strip the visual features: variant A must not need them.
    for c in &mut fx.tokenized {
        c.bundle.features.clear();
    }
    let (train, held) = fx.tokenized.split_at(8);
    let s = stage_registry().create("2a", &()).unwrap();
    let cfg = tiny_stage(
        StageConfig {
            variant: "2a".into(),
            ..StageConfig::stage2()
        },
        150,
    );
    let untrained = init_stage(s.as_ref(), &fx.ctx, &cfg).unwrap();
    let trained = train_stage(s.as_ref(), &fx.ctx, train, &cfg, |_| {}).unwrap();
    let before = held_out_loss(s.as_ref(), &fx.ctx, &untrained, held, 10, 5).unwrap();
    let after = held_out_loss(s.as_ref(), &fx.ctx, &trained, held, 10, 5).unwrap();
    assert!(after < before, "held-out perplexity {} -> {}", before.exp(), after.exp());
}

#[test]
fn fine_tokens_improve_reconstruction() {
    let fx = fixture(2, false);
    let s = stage_registry().create("3", &()).unwrap();
    let mut cfg = tiny_stage(StageConfig::stage3(), 1500);
    cfg.model.d_model = 32;
    cfg.model.d_ff = 128;
    cfg.model.n_layers = 2;
    cfg.optimizer.learning_rate = 3e-3;
    let mut last = 0.0;
    let w = train_stage(s.as_ref(), &fx.ctx, &fx.tokenized, &cfg, |st| last = st.loss).unwrap();
    let codec: &Codec = &fx.codec;
    let (nc, n) = (fx.cfg.codec.n_coarse, fx.cfg.codec.n_levels);
    let (mut coarse_only, mut completed, mut truth) = (0.0, 0.0, 0.0);
    for (clip, tok) in fx.clips.iter().zip(&fx.tokenized) {
        let secs = tok.duration_s;
        let reference = clip.waveform.slice(0, secs * 16_000).unwrap();
        let coarse = tok.acoustic.select_levels(0..nc).unwrap();
        let mut state = GenerationState::new(tok.bundle.clone(), secs);
        state.coarse = Some(coarse.clone());
        s.generate(&fx.ctx, &w, &mut state, 0.0, 9, cfg.crop_seconds).unwrap();
        let grid = coarse.concat_levels(state.fine.as_ref().unwrap()).unwrap();
        let full = codec.decode_to_length(&grid, n, 16_000, reference.len()).unwrap();
        let base = codec.decode_to_length(&grid, nc, 16_000, reference.len()).unwrap();
        completed += full.mean_squared_error(&reference).unwrap();
        coarse_only += base.mean_squared_error(&reference).unwrap();
        let exact = codec.decode_to_length(&tok.acoustic, n, 16_000, reference.len()).unwrap();
        truth += exact.mean_squared_error(&reference).unwrap();
    }
    assert!(completed <= coarse_only, "with fine {completed} vs coarse only {coarse_only} (true fine {truth})");
}
