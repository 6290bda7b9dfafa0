use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iqfm::config::RunConfig;
use iqfm::net::Preset;

fn iqfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iqfm")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = iqfm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    iqfm(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small toy corpora shared by a test.
fn toy(root: &Path) -> (PathBuf, PathBuf) {
    let run = root.join("synth");
    ok(&["synth", "--kind", "toy", "--count", "12", "--seed", "3", "--run-dir", s(&run)]);
    let art = run.join("artifacts");
    assert!(art.join("synth_spec.json").exists());
    (art.join("toy_comm.emr1"), art.join("toy_radar.emr1"))
}

fn tiny_pretrain(root: &Path, name: &str, comm: &Path, radar: &Path) -> (String, PathBuf) {
    let run = root.join(name);
    let stdout = ok(&[
        "pretrain", "--corpus", s(comm), "--corpus", s(radar), "--weight", "1", "--weight", "0.5", "--preset", "tiny", "--steps",
        "6", "--capacity", "512", "--batch", "2", "--lr", "1e-3", "--deterministic", "--seed", "5", "--run-dir", s(&run),
    ]);
    (stdout, run)
}

#[test]
fn deterministic_pretraining_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (comm, radar) = toy(dir.path());
    let (a, run_a) = tiny_pretrain(dir.path(), "a", &comm, &radar);
    let (b, run_b) = tiny_pretrain(dir.path(), "b", &comm, &radar);
    assert!(a.starts_with("final loss"));
    assert_eq!(a.lines().next().unwrap().split(';').next(), b.lines().next().unwrap().split(';').next());
    let read = |run: &Path, f: &str| fs::read_to_string(run.join(f)).unwrap();
    assert_eq!(read(&run_a, "logs/pretrain.csv"), read(&run_b, "logs/pretrain.csv"));
    assert_eq!(read(&run_a, "metrics/eval.csv"), read(&run_b, "metrics/eval.csv"));
    assert_eq!(read(&run_a, "logs/pretrain.csv").lines().count(), 7);
    let snapshot = RunConfig::from_toml(&read(&run_a, "config.toml")).unwrap();
    assert!(snapshot.deterministic);
    assert_eq!(snapshot.workers, 1);
    assert_eq!(snapshot.corpus.weights, vec![1.0, 0.5]);
    assert!(run_a.join("checkpoints/pretrain.iqfc").exists());
}

#[test]
fn pack_stats_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (comm, radar) = toy(dir.path());
    let run = dir.path().join("pack");
    let out = ok(&["pack-stats", "--corpus", s(&comm), "--corpus", s(&radar), "--capacity", "512", "--run-dir", s(&run)]);
    assert!(out.contains("utilization"));
    let csv = fs::read_to_string(run.join("metrics/pack_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("all,"));

    let (_, pre) = tiny_pretrain(dir.path(), "pre", &comm, &radar);
    let ck = pre.join("checkpoints/pretrain.iqfc");
    let eval = dir.path().join("eval");
    let out = ok(&["eval", "--checkpoint", s(&ck), "--corpus", s(&radar), "--run-dir", s(&eval)]);
    assert!(out.contains("reconstruction loss"));
    assert!(eval.join("metrics/eval.json").exists());
}

#[test]
fn downstream_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (comm, radar) = toy(dir.path());
    let (_, pre) = tiny_pretrain(dir.path(), "pre", &comm, &radar);
    let ck = pre.join("checkpoints/pretrain.iqfc");
    let data = dir.path().join("data");
    ok(&["synth", "--kind", "modulation", "--count", "8", "--seed", "1", "--run-dir", s(&data.join("train"))]);
    ok(&["synth", "--kind", "modulation", "--count", "4", "--seed", "2", "--run-dir", s(&data.join("test"))]);
    let train = data.join("train/artifacts/modulation.emr1");
    let test = data.join("test/artifacts/modulation.emr1");
    let common = ["--train", s(&train), "--test", s(&test), "--steps", "3", "--batch", "4", "--deterministic"];

    let run = dir.path().join("ft");
    let mut args = vec!["finetune", "--task", "classify", "--init", s(&ck), "--run-dir", s(&run)];
    args.extend(common);
    assert!(ok(&args).contains("accuracy"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics/report.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(fs::read_to_string(run.join("metrics/confusion.csv")).unwrap().lines().count(), 5);

    let run = dir.path().join("probe");
    let mut args = vec!["probe", "--random-init", "--preset", "tiny", "--run-dir", s(&run)];
    args.extend(common);
    assert!(ok(&args).contains("probe accuracy"));

    let run = dir.path().join("fewshot");
    let mut args = vec!["fewshot", "--k", "2", "--by-snr", "--init", s(&ck), "--run-dir", s(&run)];
    args.extend(common);
    ok(&args);
    assert_eq!(fs::read_to_string(run.join("artifacts/support.csv")).unwrap().lines().count(), 9);

    let mix = dir.path().join("mix");
    ok(&["synth", "--kind", "mixture", "--count", "6", "--run-dir", s(&mix)]);
    let mixtures = mix.join("artifacts/mixtures.emr1");
    assert!(mix.join("artifacts/mixtures.refs.emr1").exists());
    let run = dir.path().join("sep");
    ok(&[
        "separate", "--train", s(&mixtures), "--test", s(&mixtures), "--init", s(&ck), "--frozen", "--steps", "2", "--batch", "3",
        "--run-dir", s(&run),
    ]);
    let rows = fs::read_to_string(run.join("metrics/separation.csv")).unwrap();
    assert_eq!(rows.lines().count(), 13);
    assert!(run.join("artifacts/separated.emr1").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.emr1");
    let run = dir.path().join("run");
    assert_eq!(code(&["pack-stats", "--corpus", s(&missing), "--run-dir", s(&run)]), 3);
    assert_eq!(code(&["eval", "--checkpoint", s(&missing), "--corpus", s(&missing), "--run-dir", s(&run)]), 3);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "mask_ratio = 1.5\n").unwrap();
    assert_eq!(code(&["pack-stats", "--corpus", s(&missing), "--config", s(&bad), "--run-dir", s(&run)]), 2);
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(code(&["pack-stats", "--corpus", s(&missing), "--config", s(&bad), "--run-dir", s(&run)]), 2);

    let (comm, _) = toy(dir.path());
    assert_eq!(code(&["finetune", "--train", s(&comm), "--test", s(&comm), "--run-dir", s(&run)]), 2);
    assert_eq!(code(&["separate", "--from-scratch", "--frozen", "--run-dir", s(&run)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 9\npreset = \"tiny\"\n[pretrain]\ncapacity = 256\n").unwrap();
    let run = dir.path().join("synth");
    ok(&["synth", "--kind", "radar", "--count", "2", "--config", s(&cfg), "--seed", "4", "--run-dir", s(&run)]);
    let snap = RunConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(snap.seed, 4);
    assert_eq!(snap.pretrain.capacity, 256);
    assert_eq!(snap.preset, Preset::Tiny);
}
