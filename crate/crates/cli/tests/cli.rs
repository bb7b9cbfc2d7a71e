use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = r#"
held_out_clips = 2

[data]
n_clips = 5

[codec]
vocab_size = 16
kmeans_iters = 4
max_training_frames = 2000

[semantic]
vocab_size = 16
kmeans_iters = 4

[generation]
duration_s = 2
"#;

const TINY_MODEL: &str = "n_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\nrelative_position_buckets = 16\nrelative_max_distance = 64\n";

fn small_config(dir: &Path) -> PathBuf {
    let mut text = SMALL.to_string();
    for slot in ["stage1", "stage2", "stage3"] {
        text.push_str(&format!("\n[{slot}]\nsteps = 3\nbatch_size = 2\n\n[{slot}.model]\n{TINY_MODEL}"));
    }
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn vidtune(runs: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vidtune"));
    cmd.arg("--runs").arg(runs);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

fn run_dir(runs: &Path) -> PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())))
        })
        .collect();
    out.sort();
    out
}

#[test]
fn unknown_config_key_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vidtune(tmp.path(), None, &["--set", "stage1.depth=3", "synth-data"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert_eq!(err.lines().filter(|l| l.starts_with("error[")).count(), 1);
}

#[test]
fn missing_artifacts_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vidtune(tmp.path(), None, &["train-codec"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[missing-artifact]"));
    let o = vidtune(tmp.path(), None, &["generate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn end_to_end_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let runs = tmp.path().join("runs");
    let c = Some(cfg.as_path());
    ok(vidtune(&runs, c, &["synth-data"]));
    ok(vidtune(&runs, c, &["train-codec"]));
    ok(vidtune(&runs, c, &["train-semantic"]));
    for v in ["1", "2b", "3"] {
        ok(vidtune(&runs, c, &["train-stage", v]));
    }
    let run = run_dir(&runs);
    assert!(run.join("config.toml").is_file());
    assert!(run.join("pipeline.json").is_file());
    let log = std::fs::read_to_string(run.join("train-1.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"step\"")).count(), 3);

    ok(vidtune(&runs, c, &["generate"]));
    let first = digest_dir(&run.join("generated"));
    assert_eq!(first.len(), 2);
    ok(vidtune(&runs, c, &["generate"]));
    assert_eq!(first, digest_dir(&run.join("generated")), "generation is not deterministic");

    // Scoring references against themselves gives the identity values.
    let refs = run.join("reference");
    let refs = refs.to_str().unwrap();
    let o = ok(vidtune(&runs, c, &["evaluate", "--reference", refs, "--generated", refs]));
    let out = String::from_utf8(o.stdout).unwrap();
    let metric = |name: &str| -> f64 {
        out.lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .find(|v| v["metric"] == name)
            .and_then(|v| v["value"].as_f64())
            .unwrap_or_else(|| panic!("no {name} record in {out}"))
    };
    assert!(metric("fad").abs() < 1e-6);
    assert!(metric("kld").abs() < 1e-6);
    assert!((metric("mcc") - 1.0).abs() < 1e-9);
    assert!(run.join("metrics.jsonl").is_file());

    // A stage variant that differs from the configured slot leaves the manifest alone.
    let before = std::fs::read_to_string(run.join("pipeline.json")).unwrap();
    ok(vidtune(&runs, c, &["train-stage", "2a"]));
    assert!(run.join("stage-2a.ckpt").is_file());
    assert_eq!(before, std::fs::read_to_string(run.join("pipeline.json")).unwrap());

}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let runs = tmp.path().join("runs");
    let mut args = vec!["--set", "stage1.optimizer.learning_rate=1e30", "--set", "stage1.optimizer.grad_clip=0.0"];
    args.extend(["--set", "stage1.optimizer.warmup_steps=0", "--set", "stage1.steps=20"]);
    let with = |cmd: &[&'static str]| [args.clone(), cmd.to_vec()].concat();
    let c = Some(cfg.as_path());
    for cmd in [&["synth-data"][..], &["train-codec"], &["train-semantic"]] {
        ok(vidtune(&runs, c, &with(cmd)));
    }
    let o = vidtune(&runs, c, &with(&["train-stage", "1"]));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[training-divergence]"), "{}", stderr(&o));
}
