use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ilcurate_core::coverage::{emit_coverage_curves, write_curves_csv, CurveSpec, PsPanel};

fn ilcurate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilcurate"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[test]
fn verify_bounds_all_hold() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilcurate(dir.path(), &["verify-bounds", "--seeds", "1000"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().last().unwrap().contains("1000/1000 hold"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    assert_eq!(strip_comments(&csv).lines().count(), 1001);
}

#[test]
fn coverage_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilcurate(dir.path(), &["coverage", "--panel", "ps", "--n", "1,10,100"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let written = fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
    assert!(written.starts_with("# ilcurate "));

    let spec = CurveSpec {
        ps: Some(PsPanel {
            ns: vec![1, 10, 100],
            ..PsPanel::default()
        }),
        pb: None,
    };
    let mut expected = Vec::new();
    write_curves_csv(&emit_coverage_curves(&spec).unwrap(), &mut expected).unwrap();
    assert_eq!(strip_comments(&written), String::from_utf8(expected).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        ilcurate(dir.path(), &["coverage", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(
        ilcurate(dir.path(), &["--set", "seed", "coverage"]).status.code(),
        Some(2)
    );
    assert_eq!(
        ilcurate(dir.path(), &["coverage", "--panel", "xy"]).status.code(),
        Some(2)
    );
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilcurate(dir.path(), &["--set", "train.epoch=3", "coverage"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("in.json");
    fs::write(&cfg, r#"{"seed": 5, "verify": {"seeds": 3, "max_states": 4}}"#).unwrap();
    let out = ilcurate(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "verify.seeds=9",
            "verify-bounds",
            "--seeds",
            "4",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let effective: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(effective["seed"], 5);
    assert_eq!(effective["verify"]["seeds"], 4);
    assert_eq!(effective["verify"]["max_states"], 4);
    assert!(String::from_utf8(out.stdout).unwrap().contains("4/4 hold"));
}

#[test]
fn pipeline_is_deterministic() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path();
            let ds = d.join("dataset.jsonl");
            let policy = d.join("policy.json");
            let steps: [Vec<&str>; 4] = [
                vec!["--seed", "3", "collect", "--episodes", "8", "--sigma-s", "0.02"],
                vec!["metrics", "--dataset", ds.to_str().unwrap()],
                vec![
                    "--seed",
                    "3",
                    "train",
                    "--dataset",
                    ds.to_str().unwrap(),
                    "--epochs",
                    "5",
                ],
                vec![
                    "eval",
                    "--policy",
                    policy.to_str().unwrap(),
                    "--episodes",
                    "10",
                    "--sigma-s-eval",
                    "0.01",
                ],
            ];
            for args in &steps {
                let out = ilcurate(d, args);
                assert_eq!(
                    out.status.code(),
                    Some(0),
                    "{args:?}: {}",
                    String::from_utf8_lossy(&out.stderr)
                );
            }
            ["dataset.jsonl", "policy.json", "eval.csv"].map(|f| fs::read(d.join(f)).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn small_sweep_exports_tables() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--set",
        "train.epochs=3",
        "--set",
        "sweep.train_sigma_s=[0.02]",
        "--set",
        "sweep.eval_sigma_s=[0.0,0.02]",
        "sweep",
        "--kind",
        "system",
        "--dataset-sizes",
        "4",
        "--repeats",
        "2",
        "--eval-episodes",
        "5",
    ];
    let out = ilcurate(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let raw = fs::read_to_string(dir.path().join("raw.csv")).unwrap();
    assert_eq!(strip_comments(&raw).lines().count(), 1 + 2 * 2);
    for f in ["agg.csv", "summary.md"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
