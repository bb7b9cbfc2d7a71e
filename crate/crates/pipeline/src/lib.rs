//! The three-stage generator: semantic tokens from visual conditioning,
//! coarse acoustic tokens from semantic tokens, fine acoustic tokens from
//! coarse ones, and the codec back to audio.
//!
//! Stage behaviour lives behind [`stages::StageStrategy`]; the registered
//! variants are `1`, `1-unconditional`, `2a`, `2b` and `3`.

pub mod artifacts;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod flatten;
pub mod generate;
pub mod stages;
pub mod training;

pub use artifacts::{PipelineManifest, RunDir, StageEntry};
pub use config::{EvalConfig, GenerationConfig, ModelShape, Rates, RunConfig, StageConfig};
pub use data::{tokenize_clip, tokenize_corpus, train_codec, train_semantic, TokenizedClip};
pub use flatten::{flatten_grid, unflatten};
pub use generate::{Generator, StageModel};
pub use stages::{stage_registry, GenerationState, Role, StageContext, StageStrategy};
pub use training::{fixed_examples, held_out_loss, init_stage, sample_batch, train_stage};
