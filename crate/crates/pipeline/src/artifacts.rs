//! On-disk layout of a run and the manifest tying its artifacts together.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vidtune_core::codec::Codec;
use vidtune_core::semantic::{embedder_registry, SemanticCodebook, SemanticTokenizer};
use vidtune_core::{CoreError, Result};
use vidtune_seqmodel::{Checkpoint, EncoderInputSpec};

use crate::config::{RunConfig, StageConfig};
use crate::generate::{Generator, StageModel};
use crate::stages::{stage_registry, StageContext};

pub const MANIFEST_FILE: &str = "pipeline.json";

/// A trained stage as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub variant: String,
    pub checkpoint: PathBuf,
}

/// Paths (relative to the manifest) of the codec, the semantic codebook
/// and the stage checkpoints, plus the encoder adaptors the stages share.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineManifest {
    pub config_hash: String,
    pub codec: Option<PathBuf>,
    pub semantic_codebook: Option<PathBuf>,
    pub visual_inputs: Vec<EncoderInputSpec>,
    pub stage1: Option<StageEntry>,
    pub stage2: Option<StageEntry>,
    pub stage3: Option<StageEntry>,
}

fn missing(path: &Path, what: &str) -> CoreError {
    CoreError::io(
        path,
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} has not been produced yet")),
    )
}

/// `<base>/<config hash>/`, holding the resolved config and every output.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory for `config` under `base` and records the
    /// resolved configuration in it.
    pub fn create(base: &Path, config: &RunConfig) -> Result<Self> {
        let root = base.join(config.hash());
        fs::create_dir_all(&root).map_err(|e| CoreError::io(&root, e))?;
        let cfg = root.join("config.toml");
        fs::write(&cfg, config.to_toml()).map_err(|e| CoreError::io(&cfg, e))?;
        Ok(Self { root })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path(MANIFEST_FILE)
    }

    pub fn load_manifest(&self) -> Result<PipelineManifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(PipelineManifest::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::format(&p, e.to_string()))
    }

    pub fn save_manifest(&self, m: &PipelineManifest) -> Result<()> {
        let p = self.manifest_path();
        let text = serde_json::to_string_pretty(m).expect("manifest serializes");
        fs::write(&p, text).map_err(|e| CoreError::io(&p, e))
    }

    /// Appends one JSON line to `<root>/<name>`.
    pub fn append_jsonl<T: Serialize>(&self, name: &str, record: &T) -> Result<()> {
        let p = self.path(name);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| CoreError::io(&p, e))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| CoreError::io(&p, e))
    }

    fn required(&self, rel: &Option<PathBuf>, what: &str, fallback: &str) -> Result<PathBuf> {
        let p = self.path(rel.clone().unwrap_or_else(|| fallback.into()));
        if p.exists() {
            Ok(p)
        } else {
            Err(missing(&p, what))
        }
    }

    pub fn load_codec(&self, config: &RunConfig) -> Result<Codec> {
        let m = self.load_manifest()?;
        Codec::load(self.required(&m.codec, "the codec", "codec.cb")?, config.codec.clone())
    }

    pub fn load_semantic(&self, config: &RunConfig) -> Result<SemanticTokenizer> {
        let m = self.load_manifest()?;
        let codebook = SemanticCodebook::load(self.required(&m.semantic_codebook, "the semantic codebook", "semantic.cb")?)?;
        let embedder = embedder_registry().create(&config.semantic.embedder, &config.semantic)?;
        SemanticTokenizer::new(embedder, codebook)
    }

    /// Loads a stage checkpoint and the matching strategy.
    pub fn load_stage(&self, entry: &Option<StageEntry>, slot: &str, config: &StageConfig) -> Result<StageModel> {
        let entry = entry
            .as_ref()
            .ok_or_else(|| missing(&self.path(format!("{slot}.ckpt")), &format!("{slot} checkpoint")))?;
        let path = self.path(&entry.checkpoint);
        if !path.exists() {
            return Err(missing(&path, &format!("{slot} checkpoint")));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.stage != entry.variant {
            return Err(CoreError::Config(format!(
                "{} is tagged stage '{}', manifest says '{}'",
                path.display(),
                ck.stage,
                entry.variant
            )));
        }
        let strategy = stage_registry().create(&ck.stage, &())?;
        Ok(StageModel::new(strategy, ck.weights, config))
    }

    /// Stage context from the config, the trained tokenizers and the manifest.
    pub fn context(&self, config: &RunConfig, codec: &Codec, semantic_vocab: usize) -> Result<StageContext> {
        let m = self.load_manifest()?;
        Ok(StageContext {
            rates: config.rates()?,
            semantic_vocab,
            acoustic_vocab: codec.config().vocab_size,
            n_coarse: codec.config().n_coarse,
            n_fine: codec.config().n_fine,
            conditioning: config.conditioning.clone(),
            visual_inputs: m.visual_inputs,
        })
    }

    /// Assembles a generator from every artifact of the run.
    pub fn generator(&self, config: &RunConfig) -> Result<Generator> {
        let m = self.load_manifest()?;
        let codec = self.load_codec(config)?;
        let semantic = self.load_semantic(config)?;
        let ctx = self.context(config, &codec, semantic.vocab_size())?;
        let stages = [
            self.load_stage(&m.stage1, "stage1", &config.stage1)?,
            self.load_stage(&m.stage2, "stage2", &config.stage2)?,
            self.load_stage(&m.stage3, "stage3", &config.stage3)?,
        ];
        Generator::new(ctx, codec, config.sample_rate, stages)
    }
}
