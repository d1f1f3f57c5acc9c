//! Black-box tests of the `bcbf` binary: argument handling, exit codes,
//! log format, and cross-invocation determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcbf")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn simulate_writes_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short.cfg", "t_final = 1.0\n");
    let out_path = dir.path().join("run.csv");
    let out = bcbf(&[
        "simulate",
        "--scenario",
        "double-integrator",
        "--controller",
        "ue-bcbf",
        "--omega",
        "0.2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,x0,x1,u0,mode,d0,d1,dhat0,dhat1,ebar,h,hb_T,min_h_margin,qp_status"
    );
    assert_eq!(lines.count(), 101);
    assert!(!text.contains('\r'));
}

#[test]
fn simulate_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short.cfg", "t_final = 1.5\n");
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out_path = dir.path().join(name);
        let out = bcbf(&[
            "simulate",
            "--scenario",
            "double-integrator",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        outputs.push(std::fs::read(&out_path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn simulate_renders_an_svg_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short.cfg", "t_final = 1.0\n");
    let csv = dir.path().join("run.csv");
    let svg = dir.path().join("run.svg");
    let out = bcbf(&[
        "simulate",
        "--scenario",
        "quadrotor",
        "--controller",
        "ue-bcbf",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let body = std::fs::read_to_string(&svg).unwrap();
    assert!(body.starts_with("<svg"));
    assert!(body.contains("<polyline"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("x.csv");
    // Unknown subcommand (clap).
    let out = bcbf(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    // Missing required --out (clap).
    let out = bcbf(&["simulate", "--scenario", "double-integrator"]);
    assert_eq!(out.status.code(), Some(2));
    // Unknown scenario (config validation).
    let out = bcbf(&["simulate", "--scenario", "unicycle", "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("unicycle"));
    // Unknown controller.
    let out = bcbf(&[
        "simulate",
        "--scenario",
        "double-integrator",
        "--controller",
        "pid",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // Unknown config key.
    let cfg = write_config(dir.path(), "bad.cfg", "gravity = 9.81\n");
    let out = bcbf(&[
        "simulate",
        "--scenario",
        "double-integrator",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_path.exists());
}

#[test]
fn aborted_run_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // A start state whose backup flow leaves the inflated domain kills the
    // run on the first step.
    let cfg = write_config(dir.path(), "doomed.cfg", "x0 = 4.5, 3.0\n");
    let out_path = dir.path().join("doomed.csv");
    let out = bcbf(&[
        "simulate",
        "--scenario",
        "double-integrator",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("aborted"));
}

#[test]
fn verify_suites_pass_on_small_batches() {
    let out = bcbf(&[
        "verify",
        "bounds",
        "--scenario",
        "double-integrator",
        "--trials",
        "25",
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("0 violations"), "stdout: {}", stdout(&out));

    let out = bcbf(&[
        "verify",
        "sensitivity",
        "--scenario",
        "quadrotor",
        "--trials",
        "5",
        "--seed",
        "2",
        "--sequential",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("max relative error"));

    let out = bcbf(&["verify", "estimator", "--scenario", "double-integrator"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("max envelope ratio"));
}

#[test]
fn verify_subset_reports_the_untightened_demo() {
    let out = bcbf(&[
        "verify",
        "subset",
        "--scenario",
        "double-integrator",
        "--trials",
        "60",
        "--seed",
        "4",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("0 implication violations"), "stdout: {text}");
    assert!(text.contains("untightened baseline"), "stdout: {text}");
}

#[test]
fn compare_prints_the_table_and_passes_stock_assertions() {
    let out = bcbf(&["compare", "--scenario", "double-integrator"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for needle in ["ue-bcbf", "dr-bcbf", "bcbf", "min h", "PASS bcbf min h < 0"] {
        assert!(text.contains(needle), "missing '{needle}' in: {text}");
    }
    assert!(!text.contains("FAIL"), "stdout: {text}");
}
