//! Run configuration: every module's settings in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vidtune_core::codec::CodecConfig;
use vidtune_core::conditioning::ConditioningConfig;
use vidtune_core::datagen::SyntheticSpec;
use vidtune_core::eval::BeatTrackerConfig;
use vidtune_core::semantic::SemanticConfig;
use vidtune_core::{CoreError, Result};
use vidtune_seqmodel::OptimizerConfig;

use crate::stages::{stage_registry, Role};

/// Transformer size shared by every stage config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub relative_position_buckets: usize,
    pub relative_max_distance: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            relative_position_buckets: 32,
            relative_max_distance: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Registered stage strategy, see [`stage_registry`].
    pub variant: String,
    pub model: ModelShape,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_seconds: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl StageConfig {
    fn with(variant: &str, crop_seconds: usize, temperature: f64, seed: u64) -> Self {
        Self {
            variant: variant.into(),
            model: ModelShape::default(),
            optimizer: OptimizerConfig::default(),
            steps: 600,
            batch_size: 8,
            crop_seconds,
            temperature,
            seed,
        }
    }

    pub fn stage1() -> Self {
        Self::with("1", 10, 1.0, 101)
    }

    pub fn stage2() -> Self {
        Self::with("2b", 10, 0.95, 202)
    }

    pub fn stage3() -> Self {
        Self::with("3", 3, 0.4, 303)
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub duration_s: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { duration_s: 10, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub embedder: String,
    pub class_model: String,
    pub metrics: Vec<String>,
    pub beat_tolerance_s: f64,
    pub embedder_seed: u64,
    pub beat_tracker: BeatTrackerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embedder: "log-mel-128".into(),
            class_model: "band-energy".into(),
            metrics: ["fad", "kld", "mcc", "beats"].map(String::from).to_vec(),
            beat_tolerance_s: vidtune_core::eval::DEFAULT_BEAT_TOLERANCE_S,
            embedder_seed: 0x5eed_f00d,
            beat_tracker: BeatTrackerConfig::default(),
        }
    }
}

/// Complete configuration of a run. Defaults are the desk-scale setup:
/// 16 kHz audio, 25 acoustic and 25 semantic frames per second, two codec
/// levels of 64 codes, 64 semantic codes, and 2-layer 64-wide Transformers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub data: SyntheticSpec,
    pub codec: CodecConfig,
    pub codec_seed: u64,
    pub semantic: SemanticConfig,
    pub semantic_seed: u64,
    pub conditioning: ConditioningConfig,
    /// Clips at the end of the corpus kept out of stage training.
    pub held_out_clips: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            data: SyntheticSpec::default(),
            codec: CodecConfig {
                frame_size: 640,
                n_levels: 2,
                n_coarse: 1,
                n_fine: 1,
                vocab_size: 64,
                kmeans_iters: 25,
                max_training_frames: Some(50_000),
            },
            codec_seed: 11,
            semantic: SemanticConfig {
                vocab_size: 64,
                ..Default::default()
            },
            semantic_seed: 13,
            conditioning: ConditioningConfig {
                clip_dim: 64,
                ..Default::default()
            },
            held_out_clips: 20,
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            stage3: StageConfig::stage3(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn whole(rate: f64, what: &str) -> Result<usize> {
    if rate <= 0.0 || (rate - rate.round()).abs() > 1e-9 {
        return Err(CoreError::Validation(format!(
            "{what} must be a whole number of frames per second, got {rate}"
        )));
    }
    Ok(rate.round() as usize)
}

/// Frame rates of the three token and feature streams, all whole per second
/// so that integer-second crops cut every stream on a frame boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rates {
    pub acoustic: usize,
    pub semantic: usize,
    pub visual: usize,
}

impl Rates {
    pub fn new(acoustic: f64, semantic: f64, visual: f64) -> Result<Self> {
        Ok(Self {
            acoustic: whole(acoustic, "acoustic frame rate")?,
            semantic: whole(semantic, "semantic frame rate")?,
            visual: whole(visual, "visual frame rate")?,
        })
    }

    /// Acoustic-frame time of semantic frame `t`.
    pub fn semantic_time(&self, t: usize) -> i64 {
        ((t * self.acoustic) as f64 / self.semantic as f64).round() as i64
    }

    /// Time of visual frame `s` in units of `per_second` frames.
    pub fn visual_time(&self, s: usize, per_second: usize) -> i64 {
        ((s * per_second) as f64 / self.visual as f64).round() as i64
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| CoreError::Validation(format!("config: {e}")))?;
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn rates(&self) -> Result<Rates> {
        Rates::new(
            self.codec.frame_rate(self.sample_rate),
            self.semantic.frame_rate,
            self.conditioning.frame_rate,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(CoreError::Validation(m));
        self.codec.validate()?;
        self.semantic.validate()?;
        self.data.validate()?;
        for (what, sr) in [
            ("data", self.data.sample_rate),
            ("semantic", self.semantic.sample_rate),
            ("eval.beat_tracker", self.eval.beat_tracker.sample_rate),
        ] {
            if sr != self.sample_rate {
                return invalid(format!("{what} sample rate {sr} differs from sample_rate {}", self.sample_rate));
            }
        }
        if self.sample_rate as usize % self.codec.frame_size != 0 {
            return invalid(format!(
                "codec frame_size {} does not divide sample_rate {}",
                self.codec.frame_size, self.sample_rate
            ));
        }
        self.rates()?;
        if self.conditioning.clip_dim != self.data.feature_dim {
            return invalid(format!(
                "conditioning.clip_dim {} differs from data.feature_dim {}",
                self.conditioning.clip_dim, self.data.feature_dim
            ));
        }
        let registry = stage_registry();
        for (slot, stage, role, crop) in [
            ("stage1", &self.stage1, Role::Semantic, 10),
            ("stage2", &self.stage2, Role::Coarse, 10),
            ("stage3", &self.stage3, Role::Fine, 3),
        ] {
            let strategy = registry.create(&stage.variant, &())?;
            if strategy.role() != role {
                return invalid(format!("{slot} variant '{}' does not produce {role:?} tokens", stage.variant));
            }
            if stage.crop_seconds != crop {
                return invalid(format!("{slot}.crop_seconds must be {crop}, got {}", stage.crop_seconds));
            }
            if stage.steps == 0 || stage.batch_size == 0 {
                return invalid(format!("{slot} needs positive steps and batch_size"));
            }
            if !(stage.temperature >= 0.0) {
                return invalid(format!("{slot}.temperature must be non-negative"));
            }
        }
        if self.data.duration_s < self.stage1.crop_seconds {
            return invalid(format!(
                "clips of {} s are shorter than the {} s training crop",
                self.data.duration_s, self.stage1.crop_seconds
            ));
        }
        if self.generation.duration_s == 0 || self.generation.duration_s > self.stage1.crop_seconds {
            return invalid(format!(
                "generation.duration_s must be in 1..={}, got {}",
                self.stage1.crop_seconds, self.generation.duration_s
            ));
        }
        if self.held_out_clips >= self.data.n_clips {
            return invalid("held_out_clips must leave at least one training clip".into());
        }
        Ok(())
    }
}

/// Overlays `top` on `base`, recursing into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value` to a TOML table. The value is parsed as a TOML value
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CoreError::Validation(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CoreError::Validation(format!("bad override key '{key}'")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CoreError::Validation(format!("override '{key}': '{part}' is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
