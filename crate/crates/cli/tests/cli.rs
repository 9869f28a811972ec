use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use thinknet_core::{parse_metrics_csv, parse_paired_csv, parse_sweep_csv, TrainReport};

fn thinknet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thinknet"))
        .args(args)
        .output()
        .expect("spawn thinknet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &["--n", "4", "--count", "200", "--hidden", "8", "--embed", "4", "--epochs", "2"];

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = thinknet(&args);
    assert!(o.status.success(), "train failed: {}", stderr(&o));
    o
}

#[test]
fn train_writes_outputs() {
    let dir = TempDir::new().unwrap();
    let o = train_small(dir.path(), &[]);
    assert!(stdout(&o).contains("final test accuracy"));
    for f in ["checkpoint.txt", "metrics.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let rows = parse_metrics_csv(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].losses.len(), 3);
    let report = TrainReport::from_json(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.metrics.len(), 2);
}

#[test]
fn periodic_loss_flag_is_parsed() {
    let dir = TempDir::new().unwrap();
    train_small(dir.path(), &["--loss", "delta-periodic:2"]);
    let report = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("\"loss_mode\": \"delta-periodic:2\""), "{report}");
}

#[test]
fn bad_arguments_fail() {
    let o = thinknet(&["train", "--mixer", "bogus"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    for name in ["last", "mean", "linear", "attention"] {
        assert!(err.contains(name), "{err}");
    }

    let o = thinknet(&["train", "--loss", "delta-periodic:0"]);
    assert!(!o.status.success());

    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = thinknet(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"));
    assert!(!stderr(&o).contains("Stack backtrace"));
}

#[test]
fn sweep_covers_every_horizon_and_matches_training() {
    let dir = TempDir::new().unwrap();
    let delta = dir.path().join("delta");
    let periodic = dir.path().join("periodic");
    train_small(&delta, &[]);
    train_small(&periodic, &["--loss", "delta-periodic:2"]);
    let out = dir.path().join("sweep");
    let o = thinknet(&[
        "sweep",
        "--checkpoint",
        delta.join("checkpoint.txt").to_str().unwrap(),
        "--checkpoint",
        periodic.join("checkpoint.txt").to_str().unwrap(),
        "--t-max",
        "12",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("not multiples of the period"));

    let rows = parse_sweep_csv(&fs::read_to_string(out.join("sweep.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 24);
    for mode in ["delta", "delta-periodic:2"] {
        let mine: Vec<_> = rows.iter().filter(|r| r.loss_mode.to_string() == mode).collect();
        assert_eq!(mine.iter().map(|r| r.t_eval).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
    }

    // At the training horizon the sweep reproduces the last epoch's test accuracy exactly.
    let metrics = parse_metrics_csv(&fs::read_to_string(delta.join("metrics.csv")).unwrap()).unwrap();
    let at_train = rows
        .iter()
        .find(|r| r.loss_mode.to_string() == "delta" && r.t_eval == 3)
        .unwrap();
    assert_eq!(at_train.accuracy.to_bits(), metrics.last().unwrap().test_acc.to_bits());

    let (columns, paired) = parse_paired_csv(&fs::read_to_string(out.join("paired.csv")).unwrap()).unwrap();
    assert_eq!(columns.len(), 2);
    assert_eq!(paired.len(), 12);
    assert!(paired.iter().all(|(_, r)| r.len() == 2 && r.iter().all(Option::is_some)));
    assert!(out.join("sweep_report.json").exists());
}

#[test]
fn eval_prints_per_horizon_table() {
    let dir = TempDir::new().unwrap();
    train_small(dir.path(), &[]);
    let o = thinknet(&["eval", "--out", dir.path().to_str().unwrap(), "--t-eval", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t_eval,mean_loss,accuracy");
    assert_eq!(lines.len(), 6);
    assert!(dir.path().join("eval_report.json").exists());
}

#[test]
fn train_gradient_hook() {
    let dir = TempDir::new().unwrap();
    let o = train_small(dir.path(), &["--selftest", "--detach-max"]);
    assert!(stdout(&o).starts_with("PASS batch gradient"), "{}", stdout(&o));
}

#[test]
fn selftest_passes_and_catches_corruption() {
    let o = thinknet(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() > 10);
    assert!(!text.contains("FAIL"));

    let o = thinknet(&["selftest", "--corrupt-max-gradient"]);
    assert!(!o.status.success());
    let text = stdout(&o);
    assert!(text.contains("FAIL gradient/max"), "{text}");
    assert!(text.contains("FAIL max-subgradient"), "{text}");
}
