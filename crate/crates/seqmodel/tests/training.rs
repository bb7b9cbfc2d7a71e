mod common;

use common::{config, example, rng};
use vidtune_seqmodel::{evaluate_loss, train_step, Adam, Architecture, Example, ModelWeights, OptimizerConfig};

/// Steps needed to push the mean loss on one fixed batch below `target`.
fn steps_to_overfit(arch: Architecture, target: f64, budget: usize) -> Option<usize> {
    let cfg = config(arch, 32, 64, 16);
    let mut w = ModelWeights::<f32>::init(&cfg, 1).unwrap();
    let mut r = rng(2);
    let batch: Vec<Example> = (0..4).map(|_| example(&mut r, &cfg, 24)).collect();
    let mut opt = Adam::new(
        &w,
        OptimizerConfig {
            learning_rate: 3e-3,
            ..Default::default()
        },
    );
    for step in 1..=budget {
        let stats = train_step(&mut w, &batch, &mut opt).unwrap();
        if step % 25 == 0 && evaluate_loss(&w, &batch).unwrap() < target {
            return Some(step);
        }
        assert!(stats.loss.is_finite());
    }
    None
}

#[test]
fn single_batch_overfits_encoder_decoder() {
    let steps = steps_to_overfit(Architecture::EncoderDecoder, 0.1, 2000);
    assert!(steps.is_some(), "loss stayed above 0.1 for 2000 steps");
}

#[test]
fn single_batch_overfits_decoder_only() {
    let steps = steps_to_overfit(Architecture::DecoderOnly, 0.1, 2000);
    assert!(steps.is_some(), "loss stayed above 0.1 for 2000 steps");
}
