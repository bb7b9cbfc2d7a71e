//! Small Transformers over discrete audio tokens.
//!
//! Pre-norm blocks with a bucketed relative-position bias, an optional
//! encoder fed by named feature adaptors, manual backpropagation, Adam, and
//! cached incremental sampling. Weights are generic over `f32`/`f64`.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod nn;
pub mod sample;
pub mod scalar;
pub mod train;
pub mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{Architecture, EncoderInputSpec, TransformerConfig};
pub use model::{EncoderInput, Example};
pub use sample::{sample_logits, DecodeState, SamplingParams};
pub use scalar::Scalar;
pub use train::{batch_gradient, evaluate_loss, train_step, Adam, OptimizerConfig, StepStats};
pub use weights::ModelWeights;
