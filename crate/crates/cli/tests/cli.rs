use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mixfunn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixfunn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

const TINY: [&str; 6] = [
    "--override",
    "train.epochs=5",
    "--override",
    "train.collocation.points=32",
    "--override",
    "eval.points=64",
];

fn tiny(cmd: &[&str]) -> Vec<String> {
    cmd.iter().chain(TINY.iter()).map(|s| s.to_string()).collect()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(&["train", "--seeds", "0,1"]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&mixfunn(&args, &dir.path().join("a")));
    ok(&mixfunn(&args, &dir.path().join("b")));
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    // two seeds, mean, std
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);
    for f in ["config.toml", "timing.csv", "history_seed0.csv", "checkpoint_seed1.toml", "solution_seed0.csv", "best.txt"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn errors_are_logged_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = mixfunn(&["train", "--override", "train.epoch=3"], dir.path());
    assert!(!o.status.success());
    let o2 = mixfunn(&["eval", "--checkpoint", "/no/such/file.toml"], dir.path());
    assert!(!o2.status.success());
    let log = fs::read_to_string(dir.path().join("errors.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["command"], "train");
    assert_eq!(lines[1]["command"], "eval");
    assert!(lines.iter().all(|l| l["level"] == "error" && l["message"].is_string()));
}

#[test]
fn checkpoint_feeds_eval_and_extract() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(&["train", "--seed", "3"]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&mixfunn(&args, &dir.path().join("run")));
    let ckpt = dir.path().join("run/checkpoint_seed3.toml");
    let ckpt = ckpt.to_str().unwrap();
    let e = mixfunn(&["eval", "--checkpoint", ckpt], &dir.path().join("eval"));
    ok(&e);
    let csv = fs::read_to_string(dir.path().join("eval/eval.csv")).unwrap();
    assert!(csv.starts_with("config_hash,checkpoint,train_error,test_error,residual_error\n"));
    let x = mixfunn(&["extract", "--checkpoint", ckpt, "--digits", "3"], &dir.path().join("x"));
    ok(&x);
    let text = String::from_utf8(x.stdout).unwrap();
    assert!(text.starts_with("u = "), "{text}");
    assert!(dir.path().join("x/expression.txt").exists());
}

#[test]
fn oracle_export_for_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    for (problem, file) in [
        ("damped_oscillator", "oscillator_reference.csv"),
        ("forced_oscillator", "oscillator_reference.csv"),
        ("quantum_well", "well_reference.csv"),
        ("burgers", "burgers_reference.csv"),
    ] {
        let out = dir.path().join(problem);
        ok(&mixfunn(&["oracle-export", "--problem", problem], &out));
        let text = fs::read_to_string(out.join(file)).unwrap();
        assert!(text.starts_with("config_hash,"), "{problem}");
        assert!(text.lines().count() > 10);
    }
}

#[test]
fn loss_vs_energy_from_a_trained_well_model() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(&[
        "loss-vs-energy",
        "--problem",
        "quantum_well",
        "--seed",
        "0",
        "--override",
        "sweep.energies.n=12",
    ]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&mixfunn(&args, dir.path()));
    let text = fs::read_to_string(dir.path().join("loss_vs_energy.csv")).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(dir.path().join("loss_vs_energy_minima.csv").exists());
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!mixfunn(&["frobnicate"], dir.path()).status.success());
    assert!(!mixfunn(&["train", "--seed", "1", "--seeds", "2"], dir.path()).status.success());
    let o = mixfunn(&["sweep-params", "--problem", "damped_oscillator"], dir.path());
    assert!(!o.status.success());
}
