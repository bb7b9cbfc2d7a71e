use serde::{Deserialize, Serialize};
use vidtune_core::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
}

/// A named encoder input projected into the model width by its own adaptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderInputSpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Output vocabulary. The decoder input table has one extra row for BOS.
    pub vocab_size: usize,
    pub max_len: usize,
    pub relative_position_buckets: usize,
    pub relative_max_distance: usize,
    /// Bucket decoder self-attention offsets in both directions. Needed when
    /// decoder positions are time stamps that are not monotone in sequence order.
    pub decoder_bidirectional: bool,
    /// Encoder adaptors, ignored by decoder-only models.
    pub encoder_inputs: Vec<EncoderInputSpec>,
    pub max_encoder_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::EncoderDecoder,
            n_layers: 4,
            n_heads: 8,
            d_model: 256,
            d_ff: 1024,
            vocab_size: 1024,
            max_len: 1024,
            relative_position_buckets: 32,
            relative_max_distance: 128,
            decoder_bidirectional: false,
            encoder_inputs: Vec::new(),
            max_encoder_len: 1024,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.relative_position_buckets < 4 || self.relative_position_buckets % 2 != 0 {
            return bad("relative_position_buckets must be even and >= 4".into());
        }
        if self.relative_max_distance < self.relative_position_buckets {
            return bad("relative_max_distance must be at least the bucket count".into());
        }
        if self.architecture == Architecture::EncoderDecoder {
            if self.encoder_inputs.is_empty() {
                return bad("encoder-decoder models need at least one encoder input".into());
            }
            let mut names: Vec<_> = self.encoder_inputs.iter().map(|s| s.name.as_str()).collect();
            names.sort_unstable();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return bad("encoder input names must be unique".into());
            }
            if self.encoder_inputs.iter().any(|s| s.dim == 0) {
                return bad("encoder input dims must be positive".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_encoder_decoder(&self) -> bool {
        self.architecture == Architecture::EncoderDecoder
    }

    /// Id fed to the decoder at position 0.
    pub fn bos_id(&self) -> usize {
        self.vocab_size
    }

    /// The 12-layer, 16-head, 1024/4096 configuration of the full-scale model.
    pub fn full_scale(architecture: Architecture, vocab_size: usize) -> Self {
        Self {
            architecture,
            n_layers: 12,
            n_heads: 16,
            d_model: 1024,
            d_ff: 4096,
            vocab_size,
            ..Default::default()
        }
    }
}
