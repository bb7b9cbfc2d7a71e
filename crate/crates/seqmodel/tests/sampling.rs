mod common;

use common::{config, encoder_input, rng, tokens};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtune_core::CoreError;
use vidtune_seqmodel::{sample_logits, Architecture, DecodeState, ModelWeights, SamplingParams};

fn params(temperature: f64, seed: u64, n: usize) -> SamplingParams {
    SamplingParams {
        temperature,
        seed,
        max_new_tokens: n,
    }
}

#[test]
fn temperature_zero_ignores_the_seed() {
    let cfg = config(Architecture::EncoderDecoder, 16, 32, 11);
    let w = ModelWeights::<f32>::init(&cfg, 3).unwrap();
    let enc = encoder_input(&mut rng(1), 4, true);
    let a = w.sample(Some(&enc), &[2, 3], None, &params(0.0, 1, 20), None).unwrap();
    let b = w.sample(Some(&enc), &[2, 3], None, &params(0.0, 999, 20), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 20);
}

#[test]
fn seeded_sampling_is_reproducible() {
    let cfg = config(Architecture::DecoderOnly, 16, 32, 11);
    let w = ModelWeights::<f32>::init(&cfg, 3).unwrap();
    let a = w.sample(None, &[], None, &params(1.0, 7, 30), None).unwrap();
    assert_eq!(a, w.sample(None, &[], None, &params(1.0, 7, 30), None).unwrap());
    assert_ne!(a, w.sample(None, &[], None, &params(1.0, 8, 30), None).unwrap());
}

#[test]
fn cached_decoding_matches_the_full_forward() {
    for arch in [Architecture::EncoderDecoder, Architecture::DecoderOnly] {
        let mut cfg = config(arch, 16, 32, 11);
        cfg.decoder_bidirectional = arch == Architecture::DecoderOnly;
        let w = ModelWeights::<f64>::init(&cfg, 3).unwrap();
        let mut r = rng(4);
        let enc = (arch == Architecture::EncoderDecoder).then(|| encoder_input(&mut r, 5, true));
        let toks = tokens(&mut r, 18, 11);
        let pos: Vec<i64> = (0..18).map(|i| (i % 9) as i64).collect();
        let full = w.forward(enc.as_ref(), &toks, Some(&pos)).unwrap();
        let mut state = DecodeState::new(&w, enc.as_ref(), pos).unwrap();
        for (i, row) in full.rows().into_iter().enumerate() {
            let input = if i == 0 { cfg.bos_id() } else { toks[i - 1] as usize };
            let step = state.step(input).unwrap();
            let diff = (&step - &row).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-10, "slot {i}: {diff}");
        }
    }
}

/// Greedy decoding by re-running the whole prefix at every step.
fn greedy_full(w: &ModelWeights<f32>, enc: Option<&vidtune_seqmodel::EncoderInput>, prefix: &[u32], n: usize) -> Vec<u32> {
    let mut seq = prefix.to_vec();
    for _ in 0..n {
        seq.push(0);
        let logits = w.forward(enc, &seq, None).unwrap();
        let last = logits.row(seq.len() - 1);
        let best = last
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        *seq.last_mut().unwrap() = best as u32;
    }
    seq.split_off(prefix.len())
}

#[test]
fn temperature_zero_equals_greedy_decoding() {
    let cfg = config(Architecture::EncoderDecoder, 16, 32, 11);
    for seed in 0..5 {
        let w = ModelWeights::<f32>::init(&cfg, seed).unwrap();
        let mut r = rng(seed);
        let enc = encoder_input(&mut r, 3, seed % 2 == 0);
        let prefix = tokens(&mut r, seed as usize, 11);
        let sampled = w.sample(Some(&enc), &prefix, None, &params(0.0, 0, 12), None).unwrap();
        assert_eq!(sampled, greedy_full(&w, Some(&enc), &prefix, 12));
    }
}

#[test]
fn allowed_ranges_are_respected() {
    let cfg = config(Architecture::DecoderOnly, 16, 32, 12);
    let w = ModelWeights::<f32>::init(&cfg, 3).unwrap();
    let allowed = |slot: usize| if slot % 2 == 0 { 0..6 } else { 6..12 };
    let out = w.sample(None, &[1], None, &params(1.0, 3, 20), Some(&allowed)).unwrap();
    for (i, t) in out.iter().enumerate() {
        assert!(allowed(i + 1).contains(t));
    }
}

#[test]
fn sampling_preconditions() {
    let cfg = config(Architecture::DecoderOnly, 16, 32, 12);
    let w = ModelWeights::<f32>::init(&cfg, 3).unwrap();
    assert!(matches!(w.sample(None, &[], None, &params(-1.0, 0, 3), None), Err(CoreError::Domain(_))));
    assert!(matches!(w.sample(None, &[1; 60], None, &params(1.0, 0, 5), None), Err(CoreError::Domain(_))));
}

/// A model whose first-step distribution is set by hand: every block is
/// zeroed so the residual stream carries the BOS embedding straight to the
/// output layer.
fn hand_set_model(probs: &[f64]) -> ModelWeights<f64> {
    let vocab = probs.len();
    let cfg = config(Architecture::DecoderOnly, 8, 8, vocab);
    let mut w = ModelWeights::<f64>::init(&cfg, 0).unwrap();
    w.for_each_mut(|_, mut t| t.fill(0.0));
    let d = cfg.d_model;
    w.token_embedding[[vocab, 0]] = 1.0;
    w.decoder.final_norm = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    w.output = Array2::zeros((d, vocab));
    for (j, p) in probs.iter().enumerate() {
        w.output[[0, j]] = p.ln();
    }
    w
}

#[test]
fn monte_carlo_frequency_of_a_ninety_percent_token() {
    let mut probs = vec![0.1 / 4.0; 5];
    probs[3] = 0.9;
    let w = hand_set_model(&probs);
    let logits = w.forward(None, &[0], None).unwrap();
    let z: f64 = logits.row(0).iter().map(|v| v.exp()).sum();
    // Exact up to the normaliser epsilon.
    assert!((logits[[0, 3]].exp() / z - 0.9).abs() < 1e-5);
    let draws = 10_000;
    let hits = (0..draws)
        .filter(|&seed| w.sample(None, &[], None, &params(1.0, seed, 1), None).unwrap()[0] == 3)
        .count();
    let freq = hits as f64 / draws as f64;
    assert!((freq - 0.9).abs() <= 0.02, "frequency {freq}");
}

#[test]
fn logits_sampler_matches_probabilities() {
    let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0; 3];
    for _ in 0..30_000 {
        counts[sample_logits(&logits, 1.0, &mut r).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip([0.5, 0.3, 0.2]) {
        assert!((*c as f64 / 30_000.0 - p).abs() < 0.01);
    }
}
