use std::path::{Path, PathBuf};

use serde_json::json;
use vidtune_core::datagen::{read_style, write_synthetic_corpus, DatasetManifest, PairedClip};
use vidtune_core::eval::render_table;
use vidtune_core::{CoreError, Result};
use vidtune_pipeline::evaluate::evaluate_dirs;
use vidtune_pipeline::stages::derive_seed;
use vidtune_pipeline::{
    held_out_loss, stage_registry, tokenize_corpus, train_codec, train_semantic, train_stage, Role, RunConfig, RunDir,
    StageConfig, StageContext, StageEntry,
};
use vidtune_seqmodel::Checkpoint;

use crate::{Cli, Command};

fn not_found(path: &Path, what: &str) -> CoreError {
    CoreError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, what.to_string()))
}

fn load_clips(run: &RunDir, data: &Option<PathBuf>, cfg: &RunConfig) -> Result<Vec<PairedClip>> {
    let path = data.clone().unwrap_or_else(|| run.data_dir().join("manifest.jsonl"));
    if !path.exists() {
        return Err(not_found(&path, "dataset manifest not found; run synth-data or pass --data"));
    }
    let manifest = DatasetManifest::load(&path)?;
    manifest.validate(cfg.stage1.crop_seconds as f64, cfg.conditioning.frame_rate)
}

fn split_held_out<T>(items: &[T], held_out: usize) -> Result<(&[T], &[T])> {
    if items.len() <= held_out {
        return Err(CoreError::Dataset(format!(
            "{} clips leave nothing to train on after holding out {held_out}",
            items.len()
        )));
    }
    Ok(items.split_at(items.len() - held_out))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let run = RunDir::create(&cli.runs, &cfg)?;
    eprintln!("run {} at {}", cfg.hash(), run.root.display());
    match &cli.command {
        Command::SynthData => synth_data(&run, &cfg),
        Command::TrainCodec { data } => {
            let clips = load_clips(&run, data, &cfg)?;
            let waves: Vec<_> = clips.into_iter().map(|c| c.waveform).collect();
            let codec = train_codec(&cfg, &waves)?;
            codec.save(run.path("codec.cb"))?;
            let mut m = run.load_manifest()?;
            m.config_hash = cfg.hash();
            m.codec = Some("codec.cb".into());
            run.save_manifest(&m)?;
            eprintln!("codec: {} levels of {} codes", cfg.codec.n_levels, cfg.codec.vocab_size);
            Ok(())
        }
        Command::TrainSemantic { data } => {
            let clips = load_clips(&run, data, &cfg)?;
            let named: Vec<_> = clips.into_iter().map(|c| (c.clip_id, c.waveform)).collect();
            let tokenizer = train_semantic(&cfg, &named)?;
            tokenizer.codebook().save(run.path("semantic.cb"))?;
            let mut m = run.load_manifest()?;
            m.config_hash = cfg.hash();
            m.semantic_codebook = Some("semantic.cb".into());
            run.save_manifest(&m)?;
            eprintln!("semantic codebook: {} codes", tokenizer.vocab_size());
            Ok(())
        }
        Command::TrainStage { variant, data } => train_stage_cmd(&run, &cfg, variant, data),
        Command::Generate {
            data,
            count,
            style,
            no_style,
        } => generate(&run, &cfg, data, *count, style.as_deref(), *no_style),
        Command::Evaluate { reference, generated } => {
            let reference = reference.clone().unwrap_or_else(|| run.path("reference"));
            let generated = generated.clone().unwrap_or_else(|| run.path("generated"));
            for d in [&reference, &generated] {
                if !d.is_dir() {
                    return Err(not_found(d, "directory of WAV files not found"));
                }
            }
            let records = evaluate_dirs(&reference, &generated, &cfg.eval, cfg.sample_rate, &cfg.hash())?;
            for r in &records {
                run.append_jsonl("metrics.jsonl", r)?;
                println!("{}", serde_json::to_string(r).expect("record serializes"));
            }
            print!("{}", render_table(&cfg.hash(), &records));
            Ok(())
        }
    }
}

fn synth_data(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let dir = run.data_dir();
    let manifest = write_synthetic_corpus(&cfg.data, &dir)?;
    eprintln!("wrote {} clips to {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn slot_config(cfg: &RunConfig, role: Role) -> (&'static str, &StageConfig) {
    match role {
        Role::Semantic => ("stage1", &cfg.stage1),
        Role::Coarse => ("stage2", &cfg.stage2),
        Role::Fine => ("stage3", &cfg.stage3),
    }
}

fn train_stage_cmd(run: &RunDir, cfg: &RunConfig, variant: &str, data: &Option<PathBuf>) -> Result<()> {
    let strategy = stage_registry().create(variant, &())?;
    let (slot, base) = slot_config(cfg, strategy.role());
    let stage_cfg = StageConfig {
        variant: variant.to_string(),
        ..base.clone()
    };
    let codec = run.load_codec(cfg)?;
    let tokenizer = run.load_semantic(cfg)?;
    let clips = load_clips(run, data, cfg)?;
    let tokenized = tokenize_corpus(&clips, &codec, &tokenizer, &cfg.rates()?)?;
    let (train, held) = split_held_out(&tokenized, cfg.held_out_clips)?;

    let mut manifest = run.load_manifest()?;
    if manifest.visual_inputs.is_empty() {
        manifest.visual_inputs = StageContext::visual_inputs_for(train, &cfg.conditioning);
        run.save_manifest(&manifest)?;
    }
    let ctx = run.context(cfg, &codec, tokenizer.vocab_size())?;

    let log = format!("train-{variant}.jsonl");
    let mut log_err = None;
    let weights = train_stage(strategy.as_ref(), &ctx, train, &stage_cfg, |s| {
        let rec = json!({
            "stage": variant,
            "step": s.step,
            "loss": s.loss,
            "tokens": s.tokens,
            "grad_norm": s.grad_norm,
            "learning_rate": s.learning_rate,
        });
        if let Err(e) = run.append_jsonl(&log, &rec) {
            log_err.get_or_insert(e);
        }
        if s.step % 50 == 0 || s.step == stage_cfg.steps {
            eprintln!("stage {variant} step {} loss {:.4}", s.step, s.loss);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    if !held.is_empty() {
        let loss = held_out_loss(strategy.as_ref(), &ctx, &weights, held, stage_cfg.crop_seconds, stage_cfg.seed)?;
        run.append_jsonl(&log, &json!({ "stage": variant, "held_out_loss": loss }))?;
        eprintln!("stage {variant} held-out loss {loss:.4} over {} clips", held.len());
    }

    let file = format!("stage-{variant}.ckpt");
    Checkpoint::new(variant, weights).save(run.path(&file))?;
    if base.variant == variant {
        let entry = Some(StageEntry {
            variant: variant.to_string(),
            checkpoint: file.clone().into(),
        });
        let mut m = run.load_manifest()?;
        m.config_hash = cfg.hash();
        match slot {
            "stage1" => m.stage1 = entry,
            "stage2" => m.stage2 = entry,
            _ => m.stage3 = entry,
        }
        run.save_manifest(&m)?;
    } else {
        eprintln!("{file} saved; {slot} is configured as '{}', so the manifest is unchanged", base.variant);
    }
    Ok(())
}

fn generate(
    run: &RunDir,
    cfg: &RunConfig,
    data: &Option<PathBuf>,
    count: Option<usize>,
    style: Option<&Path>,
    no_style: bool,
) -> Result<()> {
    let generator = run.generator(cfg)?;
    let style = style.map(read_style).transpose()?;
    let clips = load_clips(run, data, cfg)?;
    let (_, held) = split_held_out(&clips, cfg.held_out_clips)?;
    let n = count.unwrap_or(held.len()).min(held.len());
    let gen_dir = run.path("generated");
    let ref_dir = run.path("reference");
    for d in [&gen_dir, &ref_dir] {
        std::fs::create_dir_all(d).map_err(|e| CoreError::io(d, e))?;
    }
    let duration = cfg.generation.duration_s;
    for (i, clip) in held.iter().take(n).enumerate() {
        let mut bundle = if no_style { clip.bundle.without_style() } else { clip.bundle.clone() };
        if let Some(s) = &style {
            bundle.style = Some(s.clone());
        }
        let wav = generator.generate(&bundle, duration, derive_seed(cfg.generation.seed, i as u64))?;
        wav.write_wav(gen_dir.join(format!("{}.wav", clip.clip_id)))?;
        clip.waveform
            .slice(0, duration * cfg.sample_rate as usize)?
            .write_wav(ref_dir.join(format!("{}.wav", clip.clip_id)))?;
        eprintln!("generated {} ({} samples)", clip.clip_id, wav.len());
    }
    Ok(())
}
