//! Objective metrics for generated audio.
//!
//! Every metric is a [`Metric`] registered by name in [`metric_registry`];
//! the evaluation driver runs a selection of them over paired
//! reference/generated clips and emits [`MetricRecord`]s.

mod beats;
mod divergence;
mod embed;
mod frechet;

pub use beats::{
    beat_alignment, detect_beats, greedy_matches, harmonic_f1, BeatList, BeatScores, BeatTracker,
    BeatTrackerConfig, DEFAULT_BEAT_TOLERANCE_S,
};
pub use divergence::{cosine_similarity, cycle_consistency, kl_divergence, kl_single, ClassProbabilities, PROBABILITY_FLOOR};
pub use embed::{
    audio_embedder_registry, class_model_registry, AudioEmbedder, BandEnergyClasses, ClassModel, EmbedderArgs,
    ProjectedLogMel, PROJECTED_DIM,
};
pub use frechet::{frechet_distance, EmbeddingSet, COVARIANCE_EPSILON};

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{CoreError, Result};
use crate::registry::Registry;

/// A reference clip and the clip generated for the same conditioning.
#[derive(Debug, Clone)]
pub struct ClipPair {
    pub clip_id: String,
    pub reference: Waveform,
    pub generated: Waveform,
}

/// One line of a metrics report. `clip_id` is `None` for aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub clip_id: Option<String>,
    pub config_hash: String,
}

impl MetricRecord {
    fn aggregate(metric: &str, value: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            clip_id: None,
            config_hash: String::new(),
        }
    }

    fn clip(metric: &str, value: f64, clip_id: &str) -> Self {
        Self {
            metric: metric.into(),
            value,
            clip_id: Some(clip_id.into()),
            config_hash: String::new(),
        }
    }
}

/// Shared extractors handed to every metric.
pub struct EvalContext {
    pub embedder: Box<dyn AudioEmbedder>,
    pub class_model: Box<dyn ClassModel>,
    pub tracker: BeatTracker,
    pub beat_tolerance_s: f64,
}

impl EvalContext {
    pub fn new(embedder: &str, class_model: &str, args: &EmbedderArgs, tracker: BeatTrackerConfig, beat_tolerance_s: f64) -> Result<Self> {
        Ok(Self {
            embedder: audio_embedder_registry().create(embedder, args)?,
            class_model: class_model_registry().create(class_model, args)?,
            tracker: BeatTracker::new(tracker)?,
            beat_tolerance_s,
        })
    }

    pub fn default_for(sample_rate: u32) -> Result<Self> {
        let args = EmbedderArgs {
            sample_rate,
            ..Default::default()
        };
        Self::new(
            "log-mel-128",
            "band-energy",
            &args,
            BeatTrackerConfig {
                sample_rate,
                ..Default::default()
            },
            DEFAULT_BEAT_TOLERANCE_S,
        )
    }
}

pub trait Metric: Send + Sync {
    fn name(&self) -> &'static str;
    fn compute(&self, pairs: &[ClipPair], ctx: &EvalContext) -> Result<Vec<MetricRecord>>;
}

fn embed_all(pairs: &[ClipPair], ctx: &EvalContext) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let out: Vec<(Vec<f32>, Vec<f32>)> = pairs
        .par_iter()
        .map(|p| Ok((ctx.embedder.embed(&p.reference)?, ctx.embedder.embed(&p.generated)?)))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

fn to_set(rows: &[Vec<f32>], label: &str) -> Result<EmbeddingSet> {
    let dim = rows.first().map_or(0, Vec::len);
    EmbeddingSet::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j] as f64), label)
}

struct Fad;

impl Metric for Fad {
    fn name(&self) -> &'static str {
        "fad"
    }

    fn compute(&self, pairs: &[ClipPair], ctx: &EvalContext) -> Result<Vec<MetricRecord>> {
        let (refs, gens) = embed_all(pairs, ctx)?;
        let fd = frechet_distance(&to_set(&refs, "reference")?, &to_set(&gens, "generated")?)?;
        Ok(vec![MetricRecord::aggregate("fad", fd)])
    }
}

struct Kld;

impl Metric for Kld {
    fn name(&self) -> &'static str {
        "kld"
    }

    fn compute(&self, pairs: &[ClipPair], ctx: &EvalContext) -> Result<Vec<MetricRecord>> {
        let probs: Vec<(Vec<f64>, Vec<f64>)> = pairs
            .par_iter()
            .map(|p| Ok((ctx.class_model.predict(&p.reference)?, ctx.class_model.predict(&p.generated)?)))
            .collect::<Result<_>>()?;
        let (r, g): (Vec<_>, Vec<_>) = probs.into_iter().unzip();
        let (r, g) = (ClassProbabilities::new(r)?, ClassProbabilities::new(g)?);
        let mut records: Vec<MetricRecord> = pairs
            .iter()
            .zip(r.rows().iter().zip(g.rows()))
            .map(|(p, (a, b))| MetricRecord::clip("kld", kl_single(a, b), &p.clip_id))
            .collect();
        records.push(MetricRecord::aggregate("kld", kl_divergence(&r, &g)?));
        Ok(records)
    }
}

struct Mcc;

impl Metric for Mcc {
    fn name(&self) -> &'static str {
        "mcc"
    }

    fn compute(&self, pairs: &[ClipPair], ctx: &EvalContext) -> Result<Vec<MetricRecord>> {
        let (refs, gens) = embed_all(pairs, ctx)?;
        let mut records = Vec::with_capacity(pairs.len() + 1);
        for (p, (g, r)) in pairs.iter().zip(gens.iter().zip(&refs)) {
            records.push(MetricRecord::clip("mcc", cosine_similarity(g, r)?, &p.clip_id));
        }
        records.push(MetricRecord::aggregate("mcc", cycle_consistency(&gens, &refs)?));
        Ok(records)
    }
}

struct BeatAlignment;

impl Metric for BeatAlignment {
    fn name(&self) -> &'static str {
        "beats"
    }

    fn compute(&self, pairs: &[ClipPair], ctx: &EvalContext) -> Result<Vec<MetricRecord>> {
        let scores: Vec<Option<BeatScores>> = pairs
            .par_iter()
            .map(|p| {
                let r = ctx.tracker.detect(&p.reference)?;
                let g = ctx.tracker.detect(&p.generated)?;
                match beat_alignment(&g, &r, ctx.beat_tolerance_s) {
                    Ok(s) => Ok(Some(s)),
                    Err(CoreError::UndefinedMetric(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let mut records = Vec::new();
        let mut sums = [0.0f64; 4];
        let mut n = 0usize;
        for (p, s) in pairs.iter().zip(&scores) {
            if let Some(s) = s {
                let values = [s.bcs, s.bhs, s.f1, s.raw_coverage];
                for ((name, v), acc) in ["bcs", "bhs", "f1", "raw_bcs"].iter().zip(values).zip(sums.iter_mut()) {
                    records.push(MetricRecord::clip(name, v, &p.clip_id));
                    *acc += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(CoreError::UndefinedMetric("no reference clip has detectable beats".into()));
        }
        for (name, s) in ["bcs", "bhs", "f1", "raw_bcs"].iter().zip(sums) {
            records.push(MetricRecord::aggregate(name, s / n as f64));
        }
        Ok(records)
    }
}

pub fn metric_registry() -> Registry<dyn Metric> {
    let mut reg: Registry<dyn Metric> = Registry::new("metric");
    reg.register("fad", "Fréchet distance between clip embedding sets", |_| Ok(Box::new(Fad)));
    reg.register("kld", "KL divergence of class probabilities", |_| Ok(Box::new(Kld)));
    reg.register("mcc", "mean cosine similarity of paired embeddings", |_| Ok(Box::new(Mcc)));
    reg.register("beats", "beat coverage, hit and F1 scores", |_| Ok(Box::new(BeatAlignment)));
    reg
}

/// Runs the named metrics in order and concatenates their records.
pub fn evaluate(pairs: &[ClipPair], metrics: &[String], ctx: &EvalContext) -> Result<Vec<MetricRecord>> {
    let registry = metric_registry();
    let mut out = Vec::new();
    for name in metrics {
        out.extend(registry.create(name, &())?.compute(pairs, ctx)?);
    }
    Ok(out)
}

/// Aggregate columns laid out as `FAD KLD MCC BCS BHS F1`; missing metrics print `-`.
pub fn render_table(label: &str, records: &[MetricRecord]) -> String {
    let get = |m: &str| {
        records
            .iter()
            .find(|r| r.metric == m && r.clip_id.is_none())
            .map(|r| r.value)
    };
    let cols = ["fad", "kld", "mcc", "bcs", "bhs", "f1"];
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "model", "FAD", "KLD", "MCC", "BCS", "BHS", "F1");
    let _ = write!(s, "{label:<24}");
    for c in cols {
        match get(c) {
            Some(v) => {
                let _ = write!(s, " {v:>9.4}");
            }
            None => {
                let _ = write!(s, " {:>9}", "-");
            }
        }
    }
    s.push('\n');
    s
}
