//! `vidtune`: reproducible batch commands over one run directory.
//!
//! Every command resolves the configuration (file plus `--set` overrides),
//! writes it to `<runs>/<config hash>/config.toml` and keeps all outputs in
//! that directory. Failures print one line, `error[<class>] <message>`, and
//! exit with 2 for a missing artifact, 3 for invalid input, 4 for a diverged
//! training run and 1 otherwise.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vidtune_core::CoreError;

#[derive(Debug, Parser)]
#[command(name = "vidtune", version, about = "Video-conditioned music generation: data, training, generation, evaluation")]
struct Cli {
    /// TOML run configuration; defaults apply to every key it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set stage1.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Parent of the per-config run directories.
    #[arg(long, default_value = "runs", global = true)]
    runs: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic paired corpus to `<run>/data`.
    SynthData,
    /// Train the acoustic codec. Needs a dataset manifest.
    TrainCodec {
        /// Dataset manifest; defaults to `<run>/data/manifest.jsonl`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the semantic codebook. Needs a dataset manifest.
    TrainSemantic {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one modeling stage. Needs the codec and the semantic codebook.
    TrainStage {
        /// Stage variant: 1, 1-unconditional, 2a, 2b or 3.
        variant: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate audio for the held-out clips of the dataset. Needs every
    /// trained artifact. Writes `<run>/generated` and `<run>/reference`.
    Generate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of clips to generate (from the start of the held-out tail).
        #[arg(long)]
        count: Option<usize>,
        /// 128-d style tensor applied to every clip.
        #[arg(long)]
        style: Option<PathBuf>,
        /// Drop style vectors found in the dataset.
        #[arg(long)]
        no_style: bool,
    },
    /// Score generated WAVs against references with the same file names.
    Evaluate {
        /// Defaults to `<run>/reference`.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Defaults to `<run>/generated`.
        #[arg(long)]
        generated: Option<PathBuf>,
    },
}

fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        CoreError::Divergence { .. } => 4,
        CoreError::Validation(_)
        | CoreError::Config(_)
        | CoreError::Dataset(_)
        | CoreError::Manifest { .. }
        | CoreError::Format { .. }
        | CoreError::Checksum { .. }
        | CoreError::Shape(_)
        | CoreError::Domain(_)
        | CoreError::InsufficientData { .. }
        | CoreError::Wav { .. } => 3,
        _ => 1,
    }
}

fn class(err: &CoreError) -> &'static str {
    match err {
        CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing-artifact",
        e => e.class(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}] {msg}", class(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
