//! Metrics over directories of reference and generated WAV files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vidtune_core::eval::{evaluate, BeatTrackerConfig, ClipPair, EmbedderArgs, EvalContext, MetricRecord};
use vidtune_core::{CoreError, Result, Waveform};

use crate::config::EvalConfig;

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs every WAV in `generated` with the same file name in `reference`.
pub fn load_pairs(reference: &Path, generated: &Path) -> Result<Vec<ClipPair>> {
    let files = wav_files(generated)?;
    if files.is_empty() {
        return Err(CoreError::Dataset(format!("no .wav files in {}", generated.display())));
    }
    files
        .par_iter()
        .map(|g| {
            let name = g.file_name().expect("file has a name");
            let r = reference.join(name);
            if !r.exists() {
                return Err(CoreError::io(
                    &r,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no reference clip for a generated file"),
                ));
            }
            Ok(ClipPair {
                clip_id: g.file_stem().unwrap().to_string_lossy().into_owned(),
                reference: Waveform::read_wav(&r)?,
                generated: Waveform::read_wav(g)?,
            })
        })
        .collect()
}

pub fn eval_context(config: &EvalConfig, sample_rate: u32) -> Result<EvalContext> {
    let args = EmbedderArgs {
        sample_rate,
        seed: config.embedder_seed,
    };
    let tracker = BeatTrackerConfig {
        sample_rate,
        ..config.beat_tracker.clone()
    };
    EvalContext::new(&config.embedder, &config.class_model, &args, tracker, config.beat_tolerance_s)
}

/// Runs the configured metrics and stamps every record with `config_hash`.
pub fn evaluate_pairs(pairs: &[ClipPair], config: &EvalConfig, sample_rate: u32, config_hash: &str) -> Result<Vec<MetricRecord>> {
    let ctx = eval_context(config, sample_rate)?;
    let mut records = evaluate(pairs, &config.metrics, &ctx)?;
    for r in &mut records {
        r.config_hash = config_hash.to_string();
    }
    Ok(records)
}

pub fn evaluate_dirs(reference: &Path, generated: &Path, config: &EvalConfig, sample_rate: u32, config_hash: &str) -> Result<Vec<MetricRecord>> {
    evaluate_pairs(&load_pairs(reference, generated)?, config, sample_rate, config_hash)
}
