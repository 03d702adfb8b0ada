mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::bundled_path;
use h2tune::experiment::RunSummary;
use h2tune::federation::wire::read_stack_file;
use sha1::{Digest, Sha1};

fn h2tune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h2tune"))
        .args(args)
        .output()
        .unwrap()
}

fn run(out: &Path, extra: &[&str]) -> Output {
    let config = bundled_path();
    let mut args = vec![
        "run",
        "--config",
        config.to_str().unwrap(),
        "--rounds",
        "3",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    h2tune(&args)
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn run_writes_metrics_summary_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&run(&out, &[]));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("t,k,share_loss,specific_loss,eval_acc,gg_norm")
    );
    assert_eq!(lines.count(), 3 * 3);

    let summary = RunSummary::read(&out).unwrap();
    let bytes = fs::read(bundled_path()).unwrap();
    let mut hasher = Sha1::new();
    hasher.update(format!("blob {}\0", bytes.len()));
    hasher.update(&bytes);
    let expected: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(summary.manifest.config_hash, expected);
    assert_eq!(summary.rounds, 3);
    assert_eq!(summary.arms.len(), 1);
    assert_eq!(summary.arms[0].final_accuracy.len(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], expected.as_str());

    let global = read_stack_file(&out.join("global_final.r2g")).unwrap();
    assert_eq!((global.depth(), global.rank()), (4, 4));
}

#[test]
fn reruns_reproduce_metrics_bitwise_across_transports() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(&run(&a, &[]));
    ok(&run(&b, &[]));
    ok(&run(&c, &["--transport", "files"]));
    let metrics = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(metrics(&a), metrics(&c));
    assert!(c.join("exchange/round_2/client_2.r2g").exists());
}

#[test]
fn refuses_non_empty_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let output = run(dir.path(), &[]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn compare_reports_deltas_and_rejects_mismatched_configs() {
    let dir = tempfile::tempdir().unwrap();
    let (h2, local) = (dir.path().join("h2"), dir.path().join("local"));
    ok(&run(&h2, &[]));
    ok(&run(&local, &["--baseline", "LOCAL"]));

    let output = h2tune(&["compare", h2.to_str().unwrap(), local.to_str().unwrap()]);
    ok(&output);
    let table = String::from_utf8(output.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "client,H2TUNE#0,LOCAL#1,delta_LOCAL#1");
    assert_eq!(rows.len(), 1 + 3 + 1);
    assert!(rows[4].starts_with("mean,"));

    let output = h2tune(&["compare", h2.to_str().unwrap(), h2.to_str().unwrap()]);
    ok(&output);
    for row in String::from_utf8(output.stdout).unwrap().lines().skip(1) {
        assert_eq!(row.rsplit(',').next(), Some("0"));
    }

    let other_config = dir.path().join("other.json");
    let text = fs::read_to_string(bundled_path())
        .unwrap()
        .replace("\"seed\": 0", "\"seed\": 1");
    fs::write(&other_config, text).unwrap();
    let other = dir.path().join("other");
    let output = h2tune(&[
        "run",
        "--config",
        other_config.to_str().unwrap(),
        "--rounds",
        "1",
        "--out",
        other.to_str().unwrap(),
    ]);
    ok(&output);
    let output = h2tune(&["compare", h2.to_str().unwrap(), other.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, "{\"rank\": 4,").unwrap();
    let output = h2tune(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let output = h2tune(&["run", "--config", "/nonexistent/config.json"]);
    assert_eq!(output.status.code(), Some(2));
    let output = h2tune(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--baseline",
        "FEDAVG",
    ]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("hot.json");
    let text = fs::read_to_string(bundled_path())
        .unwrap()
        .replace("\"lr_specific\": 0.5", "\"lr_specific\": 1e12");
    fs::write(&config, text).unwrap();
    let output = h2tune(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(
        output.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn check_grads_records_worst_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let output = run(&out, &["--check-grads"]);
    ok(&output);
    assert!(String::from_utf8_lossy(&output.stdout).contains("gradient check"));
    let err = RunSummary::read(&out).unwrap().grad_check.unwrap();
    assert!(err <= 1e-5);
}

#[test]
fn zero_rounds_reports_untrained_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = bundled_path();
    ok(&h2tune(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--rounds",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "t,k,share_loss,specific_loss,eval_acc,gg_norm\n");
    let summary = RunSummary::read(&out).unwrap();
    assert_eq!(
        summary.arms[0].final_accuracy,
        summary.arms[0].initial_accuracy
    );
}

#[test]
fn several_arms_share_one_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&run(
        &out,
        &["--baseline", "H2TUNE,LOCAL,NO_DISENTANGLE,NO_MASK"],
    ));
    let summary = RunSummary::read(&out).unwrap();
    let names: Vec<_> = summary.arms.iter().map(|a| a.arm.name()).collect();
    assert_eq!(names, ["H2TUNE", "LOCAL", "NO_DISENTANGLE", "NO_MASK"]);
    for arm in &summary.arms {
        let metrics = fs::read_to_string(out.join(&arm.metrics)).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 3 * 3);
        assert!(out.join(&arm.checkpoint).exists());
    }
    let local = read_stack_file(&out.join("LOCAL/global_final.r2g")).unwrap();
    assert_eq!(local.frobenius_norm(), 0.0);

    // The H2TUNE column of a multi-arm run equals a single-arm run.
    let single = dir.path().join("single");
    ok(&run(&single, &[]));
    assert_eq!(
        fs::read(single.join("metrics.csv")).unwrap(),
        fs::read(out.join("H2TUNE/metrics.csv")).unwrap()
    );
    let output = h2tune(&["compare", single.to_str().unwrap(), out.to_str().unwrap()]);
    ok(&output);
    let table = String::from_utf8(output.stdout).unwrap();
    assert!(table.starts_with("client,H2TUNE#0,H2TUNE#1,LOCAL#2,NO_DISENTANGLE#3,NO_MASK#4,"));
    assert_eq!(table.lines().nth(1).unwrap().split(',').nth(6), Some("0"));
}
