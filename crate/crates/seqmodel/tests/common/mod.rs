#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtune_seqmodel::{Architecture, EncoderInput, EncoderInputSpec, Example, TransformerConfig};

pub fn config(arch: Architecture, d_model: usize, d_ff: usize, vocab: usize) -> TransformerConfig {
    TransformerConfig {
        architecture: arch,
        n_layers: 2,
        n_heads: 2,
        d_model,
        d_ff,
        vocab_size: vocab,
        max_len: 64,
        relative_position_buckets: 8,
        relative_max_distance: 16,
        decoder_bidirectional: false,
        encoder_inputs: match arch {
            Architecture::EncoderDecoder => vec![
                EncoderInputSpec {
                    name: "frames".into(),
                    dim: 3,
                },
                EncoderInputSpec {
                    name: "style".into(),
                    dim: 2,
                },
            ],
            Architecture::DecoderOnly => Vec::new(),
        },
        max_encoder_len: 32,
    }
}

pub fn encoder_input(rng: &mut ChaCha8Rng, frames: usize, with_style: bool) -> EncoderInput {
    let mut layout = vidtune_core::conditioning::StreamLayout {
        len: 0,
        tracks: Vec::new(),
    };
    if with_style {
        layout.push_back("style", Array2::from_shape_fn((1, 2), |_| rng.random_range(-1.0..1.0)));
    }
    layout.push_back("frames", Array2::from_shape_fn((frames, 3), |_| rng.random_range(-1.0..1.0)));
    let mut e = EncoderInput::untimed(layout);
    let offset = usize::from(with_style);
    for t in 0..frames {
        e.times[offset + t] = Some(3 * t as i64);
    }
    e
}

pub fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn example(rng: &mut ChaCha8Rng, cfg: &TransformerConfig, len: usize) -> Example {
    let encoder = cfg.is_encoder_decoder().then(|| encoder_input(rng, 4, true));
    Example::new(encoder, tokens(rng, len, cfg.vocab_size))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
