//! Audio tokenization, visual conditioning, synthetic paired data and objective
//! metrics for video-conditioned music generation.
//!
//! The crate is organised around the data flow of the generator:
//!
//! * [`codec`]: residual-vector-quantized acoustic tokens over an orthonormal
//!   per-frame transform.
//! * [`semantic`]: coarse-rate semantic tokens from clustered frame embeddings.
//! * [`conditioning`]: visual features, style embeddings and encoder stream
//!   assembly.
//! * [`datagen`]: synthetic paired corpora, dataset manifests and crops.
//! * [`eval`]: Fréchet distance, KL divergence, cycle consistency and beat
//!   alignment.
//!
//! Interchangeable feature extractors and metrics are registered by name in
//! [`registry::Registry`] instances so they can be selected from configuration.

pub mod audio;
pub mod codec;
pub mod conditioning;
pub mod container;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod registry;
pub mod semantic;

pub use audio::Waveform;
pub use error::{CoreError, Result};
