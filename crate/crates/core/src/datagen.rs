//! Synthetic paired corpora, dataset manifests, crops.
//!
//! Synthetic clips are periodic note events whose tempo and timbre class are
//! drawn per clip; the matching visual features encode `(tempo, class)`
//! through a fixed seeded linear map, so the visual-to-music correspondence
//! is known exactly.
//!
//! Manifests are UTF-8 JSON lines, one clip per line, with fields in this order:
//! `clip_id`, `audio_path`, `features` (list of `{kind, dim, path}`),
//! `style_path` (optional), `duration_s`. Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::conditioning::{ConditioningBundle, FeatureKind, StyleEmbedding, VisualEmbeddingSequence, STYLE_DIM};
use crate::container::{read_tensor, write_tensor, Tensor};
use crate::error::{CoreError, Result};

pub const MIN_TEMPO_BPM: f64 = 40.0;
pub const MAX_TEMPO_BPM: f64 = 240.0;

/// Number of harmonic partials per note.
const PARTIALS: usize = 6;
/// Envelope decay over one beat, in nepers (about 52 dB).
const DECAY_PER_BEAT: f64 = 6.0;
const ATTACK_S: f64 = 0.002;
const PEAK_AMPLITUDE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub duration_s: usize,
    pub tempo_min_bpm: f64,
    pub tempo_max_bpm: f64,
    pub n_timbre_classes: usize,
    /// Standard deviation of additive audio noise and of per-frame feature noise.
    pub noise_level: f64,
    pub seed: u64,
    pub sample_rate: u32,
    /// Width of the synthetic clip-like features.
    pub feature_dim: usize,
    /// Attach a class-dependent style embedding to every clip.
    pub with_style: bool,
    /// Fundamental of class 0; class `c` uses `base_hz + c * class_step_hz`.
    pub base_hz: f64,
    pub class_step_hz: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 200,
            duration_s: 10,
            tempo_min_bpm: 60.0,
            tempo_max_bpm: 180.0,
            n_timbre_classes: 4,
            noise_level: 0.01,
            seed: 17,
            sample_rate: 16_000,
            feature_dim: 64,
            with_style: false,
            base_hz: 150.0,
            class_step_hz: 50.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(MIN_TEMPO_BPM..=MAX_TEMPO_BPM).contains(&self.tempo_min_bpm)
            || !(MIN_TEMPO_BPM..=MAX_TEMPO_BPM).contains(&self.tempo_max_bpm)
            || self.tempo_min_bpm > self.tempo_max_bpm
        {
            return bad(format!(
                "tempo range [{}, {}] must lie within [{MIN_TEMPO_BPM}, {MAX_TEMPO_BPM}] BPM",
                self.tempo_min_bpm, self.tempo_max_bpm
            ));
        }
        if self.n_timbre_classes < 2 {
            return bad("n_timbre_classes must be >= 2".into());
        }
        if self.duration_s == 0 || self.feature_dim == 0 || self.sample_rate == 0 {
            return bad("duration, feature_dim and sample_rate must be positive".into());
        }
        if self.noise_level < 0.0 {
            return bad("noise_level must be non-negative".into());
        }
        Ok(())
    }

    fn tempo_span(&self) -> f64 {
        (self.tempo_max_bpm - self.tempo_min_bpm).max(f64::EPSILON)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLabels {
    pub tempo_bpm: f64,
    pub class: usize,
    /// Time of the first beat at or after zero.
    pub first_beat_s: f64,
}

/// A clip with its audio and conditioning.
#[derive(Debug, Clone)]
pub struct PairedClip {
    pub clip_id: String,
    pub waveform: Waveform,
    pub bundle: ConditioningBundle,
    pub labels: Option<SyntheticLabels>,
}

/// The fixed linear map from `(tempo, class)` to visual features.
#[derive(Debug, Clone)]
pub struct SyntheticFeatureMap {
    /// `(1 + n_classes) x feature_dim`; row 0 is the tempo direction.
    weight: Array2<f64>,
    tempo_min: f64,
    tempo_span: f64,
}

impl SyntheticFeatureMap {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7669_7375_616c);
        let weight = Array2::from_shape_simple_fn((1 + spec.n_timbre_classes, spec.feature_dim), || {
            StandardNormal.sample(&mut rng)
        });
        Self {
            weight,
            tempo_min: spec.tempo_min_bpm,
            tempo_span: spec.tempo_span(),
        }
    }

    fn latent(&self, tempo_bpm: f64, class: usize) -> Array1<f64> {
        let mut z = Array1::zeros(self.weight.nrows());
        z[0] = (tempo_bpm - self.tempo_min) / self.tempo_span;
        z[1 + class] = 1.0;
        z
    }

    /// Noise-free feature vector.
    pub fn encode(&self, tempo_bpm: f64, class: usize) -> Array1<f64> {
        self.latent(tempo_bpm, class).dot(&self.weight)
    }

    /// Least-squares inversion: for every class, fit the tempo coordinate and
    /// keep the class with the smallest residual.
    pub fn recover(&self, feature: &[f32]) -> (f64, usize) {
        let f = Array1::from_iter(feature.iter().map(|&v| v as f64));
        let tempo_dir = self.weight.row(0);
        let norm2 = tempo_dir.dot(&tempo_dir);
        let mut best = (f64::INFINITY, 0.0, 0);
        for c in 0..self.weight.nrows() - 1 {
            let rest = &f - &self.weight.row(1 + c);
            let u = rest.dot(&tempo_dir) / norm2;
            let resid = &rest - &(&tempo_dir * u);
            let err = resid.dot(&resid);
            if err < best.0 {
                best = (err, u, c);
            }
        }
        (self.tempo_min + best.1 * self.tempo_span, best.2)
    }
}

/// Partial amplitudes for a class, fixed independently of the corpus seed.
pub fn class_recipe(class: usize) -> [f64; PARTIALS] {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1a5_5000 + class as u64);
    let mut amps = [0.0; PARTIALS];
    for (h, a) in amps.iter_mut().enumerate() {
        *a = rng.random_range(0.2..1.0) / (1.0 + h as f64 * 0.5);
    }
    amps
}

fn class_style(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<StyleEmbedding> {
    let mut class_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x5717_e000 + class as u64));
    let noise = Normal::new(0.0, 0.1).unwrap();
    let v: Vec<f32> = (0..STYLE_DIM)
        .map(|_| {
            let base: f64 = StandardNormal.sample(&mut class_rng);
            (base + noise.sample(rng)) as f32
        })
        .collect();
    StyleEmbedding::new(v)
}

/// Renders the audio of one clip. Deterministic in all arguments.
pub fn render_audio(spec: &SyntheticSpec, tempo_bpm: f64, class: usize, first_beat_s: f64, noise_seed: u64) -> Result<Waveform> {
    let sr = spec.sample_rate as f64;
    let n = spec.duration_s * spec.sample_rate as usize;
    let period = 60.0 / tempo_bpm;
    let f0 = spec.base_hz + class as f64 * spec.class_step_hz;
    let recipe = class_recipe(class);
    let norm: f64 = recipe.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, spec.noise_level.max(0.0)).map_err(|e| CoreError::Config(e.to_string()))?;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            // Oscillators are phase-locked to the clip start; only the envelope follows the beats.
            let since = (t - first_beat_s).rem_euclid(period);
            let env = (-DECAY_PER_BEAT * since / period).exp() * (since / ATTACK_S).min(1.0);
            let tone: f64 = recipe
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * f0 * (h + 1) as f64 * t).sin())
                .sum();
            let mut s = PEAK_AMPLITUDE * env * tone / norm;
            if spec.noise_level > 0.0 {
                s += noise.sample(&mut rng);
            }
            s.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Clip `clip_index` of the corpus described by `spec`.
pub fn generate_synthetic_pair(spec: &SyntheticSpec, clip_index: usize) -> Result<PairedClip> {
    spec.validate()?;
    if clip_index >= spec.n_clips {
        return Err(CoreError::Domain(format!(
            "clip index {clip_index} out of range for {} clips",
            spec.n_clips
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(clip_index as u64 + 1);
    let tempo = rng.random_range(spec.tempo_min_bpm..=spec.tempo_max_bpm);
    let class = rng.random_range(0..spec.n_timbre_classes);
    let first_beat_s = rng.random_range(0.0..60.0 / tempo);
    let noise_seed: u64 = rng.random();
    let map = SyntheticFeatureMap::new(spec);
    let bundle = synthetic_bundle(spec, &map, tempo, class, &mut rng)?;
    let waveform = render_audio(spec, tempo, class, first_beat_s, noise_seed)?;
    Ok(PairedClip {
        clip_id: format!("synth{clip_index:05}"),
        waveform,
        bundle,
        labels: Some(SyntheticLabels {
            tempo_bpm: tempo,
            class,
            first_beat_s,
        }),
    })
}

fn synthetic_bundle(
    spec: &SyntheticSpec,
    map: &SyntheticFeatureMap,
    tempo: f64,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConditioningBundle> {
    let clean = map.encode(tempo, class);
    let noise = Normal::new(0.0, spec.noise_level).map_err(|e| CoreError::Config(e.to_string()))?;
    let frames = Array2::from_shape_fn((spec.duration_s, spec.feature_dim), |(_, d)| {
        let n = if spec.noise_level > 0.0 { noise.sample(rng) } else { 0.0 };
        (clean[d] + n) as f32
    });
    let style = if spec.with_style {
        Some(class_style(spec, class, rng)?)
    } else {
        None
    };
    Ok(ConditioningBundle {
        features: vec![VisualEmbeddingSequence::new(FeatureKind::ClipLike, frames, 1.0)],
        tokens: None,
        style,
        duration_s: spec.duration_s as f64,
    })
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Vec<PairedClip>> {
    (0..spec.n_clips).map(|i| generate_synthetic_pair(spec, i)).collect()
}

/// A crop of a paired clip aligned to whole seconds.
#[derive(Debug, Clone)]
pub struct Crop {
    pub start_s: usize,
    pub waveform: Waveform,
    pub bundle: ConditioningBundle,
}

/// Crops `crop_seconds` starting at integer second `start_s`.
pub fn crop_at(clip: &PairedClip, start_s: usize, crop_seconds: usize, frame_rate: f64) -> Result<Crop> {
    let duration = clip.waveform.duration_s();
    if (start_s + crop_seconds) as f64 > duration + 1e-9 {
        return Err(CoreError::Dataset(format!(
            "{}: crop [{start_s}, {}) s exceeds duration {duration:.3} s",
            clip.clip_id,
            start_s + crop_seconds
        )));
    }
    let sr = clip.waveform.sample_rate() as usize;
    let waveform = clip.waveform.slice(start_s * sr, crop_seconds * sr)?;
    let f0 = (start_s as f64 * frame_rate).round() as usize;
    let nf = (crop_seconds as f64 * frame_rate).round() as usize;
    let bundle = clip.bundle.crop_frames(f0, nf, frame_rate)?;
    Ok(Crop {
        start_s,
        waveform,
        bundle,
    })
}

/// Uniform integer-second start in `[0, duration - crop_seconds]`.
pub fn random_crop(clip: &PairedClip, crop_seconds: usize, frame_rate: f64, rng: &mut impl Rng) -> Result<Crop> {
    let duration = clip.waveform.duration_s();
    if (crop_seconds as f64) > duration + 1e-9 {
        return Err(CoreError::Dataset(format!(
            "{}: clip of {duration:.3} s is shorter than a {crop_seconds} s crop",
            clip.clip_id
        )));
    }
    let max_start = (duration - crop_seconds as f64 + 1e-9).floor() as usize;
    let start = rng.random_range(0..=max_start);
    crop_at(clip, start, crop_seconds, frame_rate)
}

pub fn random_crop_seeded(clip: &PairedClip, crop_seconds: usize, frame_rate: f64, seed: u64) -> Result<Crop> {
    random_crop(clip, crop_seconds, frame_rate, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDescriptor {
    pub kind: FeatureKind,
    pub dim: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub audio_path: PathBuf,
    #[serde(default)]
    pub features: Vec<FeatureDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_path: Option<PathBuf>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| CoreError::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            writeln!(out, "{line}").map_err(|e| CoreError::io(path, e))?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Loads one entry, checking it against its declared shapes.
    pub fn load_entry(&self, entry: &ManifestEntry, frame_rate: f64) -> Result<PairedClip> {
        let waveform = Waveform::read_wav(self.resolve(&entry.audio_path))?;
        if (waveform.duration_s() - entry.duration_s).abs() > 1.0 / waveform.sample_rate() as f64 {
            return Err(CoreError::Dataset(format!(
                "{}: audio lasts {:.4} s but manifest declares {} s",
                entry.clip_id,
                waveform.duration_s(),
                entry.duration_s
            )));
        }
        let expected_frames = (entry.duration_s * frame_rate + 1e-9).floor() as usize;
        let mut features = Vec::with_capacity(entry.features.len());
        for d in &entry.features {
            let path = self.resolve(&d.path);
            let t = read_tensor(&path)?;
            if t.shape.len() != 2 || t.shape[1] != d.dim {
                return Err(CoreError::Dataset(format!(
                    "{}: {} has shape {:?}, declared {} x {}",
                    entry.clip_id,
                    path.display(),
                    t.shape,
                    d.kind,
                    d.dim
                )));
            }
            if t.shape[0] != expected_frames {
                return Err(CoreError::Dataset(format!(
                    "{}: {} has {} frames, duration {} s implies {expected_frames}",
                    entry.clip_id,
                    path.display(),
                    t.shape[0],
                    entry.duration_s
                )));
            }
            let vectors = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.as_f32()?.to_vec())
                .map_err(|e| CoreError::Shape(e.to_string()))?;
            features.push(VisualEmbeddingSequence::new(d.kind, vectors, frame_rate));
        }
        let style = match &entry.style_path {
            Some(p) => Some(read_style(&self.resolve(p))?),
            None => None,
        };
        Ok(PairedClip {
            clip_id: entry.clip_id.clone(),
            waveform,
            bundle: ConditioningBundle {
                features,
                tokens: None,
                style,
                duration_s: entry.duration_s,
            },
            labels: None,
        })
    }

    /// Every entry must have a unique id, parse, and last at least `min_duration_s`.
    pub fn validate(&self, min_duration_s: f64, frame_rate: f64) -> Result<Vec<PairedClip>> {
        let mut seen = HashSet::new();
        let mut clips = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(CoreError::Dataset(format!("duplicate clip id '{}'", e.clip_id)));
            }
            if e.duration_s + 1e-9 < min_duration_s {
                return Err(CoreError::Dataset(format!(
                    "{}: duration {} s is below the {min_duration_s} s crop length",
                    e.clip_id, e.duration_s
                )));
            }
            clips.push(self.load_entry(e, frame_rate)?);
        }
        Ok(clips)
    }
}

pub fn read_style(path: &Path) -> Result<StyleEmbedding> {
    let t = read_tensor(path)?;
    if t.shape != [STYLE_DIM] {
        return Err(CoreError::Shape(format!(
            "{}: style tensor has shape {:?}, expected [{STYLE_DIM}]",
            path.display(),
            t.shape
        )));
    }
    StyleEmbedding::new(t.as_f32()?.to_vec())
}

pub fn write_style(path: &Path, style: &StyleEmbedding) -> Result<()> {
    write_tensor(path, &Tensor::f32(vec![STYLE_DIM], style.as_slice().to_vec())?)
}

/// Writes audio, features, styles, `manifest.jsonl` and `labels.jsonl`
/// under `dir` for every clip of `spec`.
pub fn write_synthetic_corpus(spec: &SyntheticSpec, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["audio", "features", "styles"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| CoreError::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(spec.n_clips);
    let labels_path = dir.join("labels.jsonl");
    let mut labels = std::fs::File::create(&labels_path).map_err(|e| CoreError::io(&labels_path, e))?;
    for i in 0..spec.n_clips {
        let clip = generate_synthetic_pair(spec, i)?;
        let audio_rel = PathBuf::from("audio").join(format!("{}.wav", clip.clip_id));
        clip.waveform.write_wav(dir.join(&audio_rel))?;
        let mut features = Vec::new();
        for f in &clip.bundle.features {
            let rel = PathBuf::from("features").join(format!("{}.{}.tensor", clip.clip_id, f.kind));
            write_tensor(
                dir.join(&rel),
                &Tensor::f32(vec![f.n_frames(), f.dim()], f.vectors.iter().copied().collect())?,
            )?;
            features.push(FeatureDescriptor {
                kind: f.kind,
                dim: f.dim(),
                path: rel,
            });
        }
        let style_path = match &clip.bundle.style {
            Some(s) => {
                let rel = PathBuf::from("styles").join(format!("{}.tensor", clip.clip_id));
                write_style(&dir.join(&rel), s)?;
                Some(rel)
            }
            None => None,
        };
        let record = serde_json::json!({ "clip_id": clip.clip_id, "labels": clip.labels });
        writeln!(labels, "{record}").map_err(|e| CoreError::io(&labels_path, e))?;
        entries.push(ManifestEntry {
            clip_id: clip.clip_id,
            audio_path: audio_rel,
            features,
            style_path,
            duration_s: spec.duration_s as f64,
        });
    }
    let manifest = DatasetManifest {
        entries,
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_clips: 6,
            duration_s: 3,
            feature_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn spec_invariants() {
        assert!(SyntheticSpec::default().validate().is_ok());
        let s = SyntheticSpec {
            tempo_max_bpm: 300.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let s = SyntheticSpec {
            n_timbre_classes: 1,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn clean_renders_are_deterministic() {
        let spec = SyntheticSpec {
            noise_level: 0.0,
            ..small_spec()
        };
        let a = render_audio(&spec, 120.0, 1, 0.1, 5).unwrap();
        let b = render_audio(&spec, 120.0, 1, 0.1, 99).unwrap();
        assert_eq!(a, b);
        let p = generate_synthetic_pair(&spec, 2).unwrap();
        let q = generate_synthetic_pair(&spec, 2).unwrap();
        assert_eq!(p.waveform, q.waveform);
        assert_eq!(p.bundle, q.bundle);
    }

    #[test]
    fn index_out_of_range() {
        assert!(generate_synthetic_pair(&small_spec(), 6).is_err());
    }

    #[test]
    fn labels_recoverable_from_clean_features() {
        let spec = SyntheticSpec {
            noise_level: 0.0,
            n_clips: 40,
            ..small_spec()
        };
        let map = SyntheticFeatureMap::new(&spec);
        for i in 0..spec.n_clips {
            let clip = generate_synthetic_pair(&spec, i).unwrap();
            let labels = clip.labels.unwrap();
            for row in clip.bundle.features[0].vectors.outer_iter() {
                let (tempo, class) = map.recover(row.as_slice().unwrap());
                assert_eq!(class, labels.class);
                assert!((tempo - labels.tempo_bpm).abs() < 1e-3, "{tempo} vs {}", labels.tempo_bpm);
            }
        }
    }

    #[test]
    fn crop_boundaries() {
        let clip = generate_synthetic_pair(&small_spec(), 0).unwrap();
        let c = random_crop_seeded(&clip, 3, 1.0, 11).unwrap();
        assert_eq!(c.start_s, 0);
        assert_eq!(c.waveform.len(), 48_000);
        assert!(random_crop_seeded(&clip, 4, 1.0, 11).is_err());
    }

    #[test]
    fn crop_frames_follow_the_source() {
        let spec = SyntheticSpec {
            duration_s: 8,
            ..small_spec()
        };
        let clip = generate_synthetic_pair(&spec, 1).unwrap();
        for seed in 0..10 {
            let c = random_crop_seeded(&clip, 3, 1.0, seed).unwrap();
            for t in 0..3 {
                assert_eq!(
                    c.bundle.features[0].vectors.row(t),
                    clip.bundle.features[0].vectors.row(c.start_s + t)
                );
            }
            let sr = 16_000;
            assert_eq!(c.waveform.samples()[0], clip.waveform.samples()[c.start_s * sr]);
        }
    }

    #[test]
    fn corpus_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            with_style: true,
            n_clips: 3,
            ..small_spec()
        };
        write_synthetic_corpus(&spec, dir.path()).unwrap();
        let manifest = DatasetManifest::load(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        let clips = manifest.validate(3.0, 1.0).unwrap();
        let original = generate_synthetic_pair(&spec, 1).unwrap();
        assert_eq!(clips[1].bundle.features, original.bundle.features);
        assert_eq!(clips[1].bundle.style, original.bundle.style);
        assert!(manifest.validate(4.0, 1.0).is_err());
    }

    #[test]
    fn manifest_rejects_frame_count_mismatch_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_clips: 2,
            ..small_spec()
        };
        let mut manifest = write_synthetic_corpus(&spec, dir.path()).unwrap();
        let mut dup = manifest.clone();
        dup.entries[1].clip_id = dup.entries[0].clip_id.clone();
        assert!(matches!(dup.validate(1.0, 1.0), Err(CoreError::Dataset(_))));
        // Rewrite clip 0 features with one frame too few.
        let path = manifest.resolve(&manifest.entries[0].features[0].path);
        write_tensor(&path, &Tensor::f32(vec![2, 8], vec![0.0; 16]).unwrap()).unwrap();
        manifest.root = dir.path().to_path_buf();
        assert!(matches!(manifest.validate(1.0, 1.0), Err(CoreError::Dataset(_))));
    }

    #[test]
    fn malformed_manifest_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"clip_id\": \"a\"}\n").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(CoreError::Manifest { line: 1, .. })));
    }
}
