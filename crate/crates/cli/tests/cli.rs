use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 2

[system]
kind = "synthetic"

[system.synthetic]
input_dim = 2
hidden = 4
context_dim = 2

[contexts.train]
kind = "uniform"
count = 5
low = [-1.0, -1.0]
high = [1.0, 1.0]

[data]
kind = "grid"
lo = [-1.0, -1.0]
hi = [1.0, 1.0]
counts = [4, 4]

[model]
variants = ["camel", "anil"]
hidden = [6]
rank = 2

[training]
steps = 30
learning_rate = 1e-2
scale_targets = false

[adaptation]
shots = [3, 6]

[evaluation]
trials = 2
held_out = 10

[bench]
repetitions = 5
rounds = 1
"#;

fn camel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camel"))
        .args(args)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn adapt_is_reproducible_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = camel(dir.path(), &["--config", &cfg, "--deterministic", "adapt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(dir.path().join("out/results.csv")).unwrap();
    assert!(!dir.path().join("out/timing.csv").exists());
    assert!(dir.path().join("out/model_camel.ckpt").exists());

    fs::remove_dir_all(dir.path().join("out")).unwrap();
    let out = camel(dir.path(), &["--config", &cfg, "--deterministic", "adapt"]);
    assert!(out.status.success());
    assert_eq!(first, fs::read(dir.path().join("out/results.csv")).unwrap());

    let report = camel(dir.path(), &["report"]);
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("== results.csv"));
    assert!(text.contains("CAMEL"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert!(camel(dir.path(), &["--config", &cfg, "--seed", "11", "generate"]).status.success());
    let text = fs::read_to_string(dir.path().join("out/dataset.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("seed=11"));
    assert_eq!(text.lines().nth(1).unwrap(), "task,phi0,phi1,x0,x1,y");
    assert_eq!(text.lines().count(), 2 + 5 * 16);
}

#[test]
fn bench_writes_timing_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = camel(dir.path(), &["--config", &cfg, "bench"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("out/bench.csv")).unwrap();
    assert!(text.contains("round,closed_form_seconds,gradient_seconds,ratio"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(camel(dir.path(), &["adapt"]).status.code(), Some(2));
    assert_eq!(camel(dir.path(), &["--config", "/nonexistent.toml", "adapt"]).status.code(), Some(2));
    let bad = write_config(dir.path(), &TINY.replace("rank = 2", "rank = 9"));
    assert_eq!(camel(dir.path(), &["--config", &bad, "adapt"]).status.code(), Some(2));
    let unknown = write_config(dir.path(), &format!("{TINY}\nwidth = 3\n"));
    assert_eq!(camel(dir.path(), &["--config", &unknown, "train"]).status.code(), Some(2));
    assert_eq!(camel(dir.path(), &["report"]).status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("learning_rate = 1e-2", "learning_rate = 1e200"));
    let out = camel(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
