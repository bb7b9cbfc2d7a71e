mod common;

use common::{config, encoder_input, example, rng, tokens};
use ndarray::Axis;
use rand::Rng;
use vidtune_core::CoreError;
use vidtune_seqmodel::{
    batch_gradient, train_step, Adam, Architecture, Example, ModelWeights, OptimizerConfig, TransformerConfig,
};

/// Central differences on every parameter, in f64.
fn max_relative_gradient_error(weights: &ModelWeights<f64>, batch: &[Example]) -> f64 {
    let (analytic, _, n) = batch_gradient(weights, batch).unwrap();
    let mean_loss = |w: &ModelWeights<f64>| {
        let total: f64 = batch.iter().map(|e| w.loss(e).unwrap().0).sum();
        total / n as f64
    };
    let analytic: Vec<f64> = analytic.tensors().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut flat_index = 0;
    let n_params = weights.n_parameters();
    for k in 0..n_params {
        let perturbed = |delta: f64| {
            let mut w = weights.clone();
            let mut i = 0;
            w.for_each_mut(|_, mut t| {
                for v in t.iter_mut() {
                    if i == k {
                        *v += delta;
                    }
                    i += 1;
                }
            });
            mean_loss(&w)
        };
        let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        let a = analytic[flat_index];
        flat_index += 1;
        let scale = a.abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn gradient_matches_finite_differences_on_small_decoder() {
    let cfg = TransformerConfig {
        d_ff: 8,
        vocab_size: 5,
        ..config(Architecture::DecoderOnly, 8, 8, 5)
    };
    let mut w = ModelWeights::<f64>::init(&cfg, 11).unwrap();
    // Non-zero biases so their gradients are exercised away from the symmetric point.
    let mut r = rng(5);
    w.decoder.rel_bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    assert!(w.n_parameters() <= 1000, "{} parameters", w.n_parameters());
    let mut r = rng(1);
    let mut batch = vec![example(&mut r, &cfg, 7), example(&mut r, &cfg, 5)];
    batch[0].loss_from = 3;
    let err = max_relative_gradient_error(&w, &batch);
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn gradient_matches_finite_differences_with_encoder_and_time_stamps() {
    let cfg = TransformerConfig {
        decoder_bidirectional: true,
        ..config(Architecture::EncoderDecoder, 8, 8, 4)
    };
    let mut w = ModelWeights::<f64>::init(&cfg, 12).unwrap();
    let mut r = rng(6);
    w.decoder.rel_bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    w.encoder.as_mut().unwrap().rel_bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    w.decoder.cross_bias.as_mut().unwrap().mapv_inplace(|_| r.random_range(-0.5..0.5));
    let mut ex = example(&mut r, &cfg, 6);
    ex.positions = Some(vec![0, 1, 2, 0, 1, 2]);
    ex.loss_from = 2;
    let err = max_relative_gradient_error(&w, &[ex]);
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn decoder_is_causal_bitwise() {
    let cfg = config(Architecture::EncoderDecoder, 16, 32, 11);
    let w = ModelWeights::<f32>::init(&cfg, 3).unwrap();
    let mut r = rng(2);
    let enc = encoder_input(&mut r, 5, true);
    let base = tokens(&mut r, 20, cfg.vocab_size);
    let logits = w.forward(Some(&enc), &base, None).unwrap();
    for _ in 0..50 {
        let t = r.random_range(0..19);
        let mut changed = base.clone();
        for tok in changed.iter_mut().skip(t + 1) {
            *tok = r.random_range(0..cfg.vocab_size as u32);
        }
        let other = w.forward(Some(&enc), &changed, None).unwrap();
        for i in 0..=t {
            let a: Vec<u32> = logits.row(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = other.row(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "position {i} changed after perturbing {}..", t + 1);
        }
    }
}

#[test]
fn softmax_rows_are_normalised() {
    let cfg = config(Architecture::DecoderOnly, 16, 32, 9);
    let w = ModelWeights::<f32>::init(&cfg, 4).unwrap();
    let logits = w.forward(None, &tokens(&mut rng(3), 12, 9), None).unwrap();
    for row in logits.axis_iter(Axis(0)) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
        let total: f32 = row.iter().map(|v| (v - m).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }
}

#[test]
fn shifting_positions_leaves_logits_unchanged() {
    let cfg = config(Architecture::DecoderOnly, 16, 32, 9);
    let w = ModelWeights::<f32>::init(&cfg, 4).unwrap();
    let toks = tokens(&mut rng(3), 12, 9);
    let pos: Vec<i64> = (0..12).collect();
    let shifted: Vec<i64> = (17..29).collect();
    assert_eq!(
        w.forward(None, &toks, Some(&pos)).unwrap(),
        w.forward(None, &toks, Some(&shifted)).unwrap()
    );
}

#[test]
fn encoder_is_permutation_equivariant_only_without_bias() {
    let cfg = config(Architecture::EncoderDecoder, 16, 32, 9);
    let mut w = ModelWeights::<f64>::init(&cfg, 4).unwrap();
    let mut r = rng(8);
    let enc = encoder_input(&mut r, 6, false);
    let mut rev = enc.clone();
    rev.layout.tracks[0].rows.invert_axis(Axis(0));
    let check = |w: &ModelWeights<f64>| {
        let a = w.encoder_states(&enc).unwrap();
        let mut b = w.encoder_states(&rev).unwrap();
        b.invert_axis(Axis(0));
        (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    assert!(check(&w) < 1e-12);
    w.encoder.as_mut().unwrap().rel_bias.mapv_inplace(|_| r.random_range(-1.0..1.0));
    assert!(check(&w) > 1e-6);
}

#[test]
fn initial_loss_is_near_uniform() {
    let cfg = TransformerConfig {
        n_layers: 2,
        n_heads: 4,
        ..config(Architecture::EncoderDecoder, 64, 128, 64)
    };
    let w = ModelWeights::<f32>::init(&cfg, 21).unwrap();
    let mut r = rng(4);
    let batch: Vec<Example> = (0..4).map(|_| example(&mut r, &cfg, 40)).collect();
    let (_, loss, _) = batch_gradient(&w, &batch).unwrap();
    let ln_v = (cfg.vocab_size as f64).ln();
    assert!((loss - ln_v).abs() / ln_v < 0.1, "loss {loss} vs ln V {ln_v}");
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise() {
    let cfg = config(Architecture::EncoderDecoder, 16, 32, 9);
    let mut w = ModelWeights::<f32>::init(&cfg, 5).unwrap();
    let before = w.clone();
    let mut opt = Adam::new(
        &w,
        OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
    );
    let mut r = rng(5);
    let batch: Vec<Example> = (0..3).map(|_| example(&mut r, &cfg, 10)).collect();
    for _ in 0..3 {
        train_step(&mut w, &batch, &mut opt).unwrap();
    }
    let bits = |w: &ModelWeights<f32>| -> Vec<u32> {
        w.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    assert_eq!(bits(&w), bits(&before));
}

#[test]
fn training_is_deterministic() {
    let cfg = config(Architecture::EncoderDecoder, 16, 32, 9);
    let run = || {
        let mut w = ModelWeights::<f32>::init(&cfg, 5).unwrap();
        let mut opt = Adam::new(&w, OptimizerConfig::default());
        let mut r = rng(5);
        let batch: Vec<Example> = (0..3).map(|_| example(&mut r, &cfg, 10)).collect();
        for _ in 0..5 {
            train_step(&mut w, &batch, &mut opt).unwrap();
        }
        w
    };
    assert_eq!(run(), run());
}

#[test]
fn nan_loss_is_a_divergence() {
    let cfg = config(Architecture::DecoderOnly, 16, 32, 9);
    let mut w = ModelWeights::<f32>::init(&cfg, 5).unwrap();
    w.output[[0, 0]] = f32::NAN;
    let before = w.clone();
    let mut opt = Adam::new(&w, OptimizerConfig::default());
    let batch = vec![example(&mut rng(1), &cfg, 6)];
    let err = train_step(&mut w, &batch, &mut opt).unwrap_err();
    assert!(matches!(err, CoreError::Divergence { step: 0, .. }), "{err}");
    assert_eq!(err.class(), "training-divergence");
    assert_eq!(format!("{:?}", w), format!("{:?}", before));
}

#[test]
fn length_overflow_and_missing_encoder_are_domain_errors() {
    let cfg = config(Architecture::EncoderDecoder, 16, 32, 9);
    let w = ModelWeights::<f32>::init(&cfg, 5).unwrap();
    let mut r = rng(1);
    let enc = encoder_input(&mut r, 3, false);
    assert!(matches!(w.forward(Some(&enc), &vec![0; 65], None), Err(CoreError::Domain(_))));
    assert!(matches!(w.forward(None, &[1, 2], None), Err(CoreError::Domain(_))));
    assert!(matches!(w.forward(Some(&enc), &[1, 9], None), Err(CoreError::Domain(_))));
}

#[test]
fn masked_span_does_not_move_the_loss_gradient() {
    // Changing targets inside the masked span only changes inputs, never the
    // loss terms; the gradient w.r.t. the output layer from those rows is zero.
    let cfg = config(Architecture::DecoderOnly, 16, 32, 9);
    let w = ModelWeights::<f64>::init(&cfg, 5).unwrap();
    let mut ex = example(&mut rng(2), &cfg, 10);
    ex.loss_from = 10;
    ex.tokens.push(3);
    let logits = w.forward(None, &ex.tokens, None).unwrap();
    let (_, n, grad) = vidtune_seqmodel::nn::masked_cross_entropy(&logits, &ex.tokens, ex.loss_from, 1.0);
    assert_eq!(n, 1);
    assert!(grad.rows().into_iter().take(10).all(|r| r.iter().all(|&v| v == 0.0)));
}
