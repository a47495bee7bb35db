//! End-to-end checks of the binary: output contracts and exit codes.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bslp"))
}

fn repo_path(rel: &str) -> String {
    let mut p = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    p.pop();
    p.pop();
    p.push(rel);
    p.to_string_lossy().into_owned()
}

fn fixture(rel: &str) -> String {
    format!("{}/tests/fixtures/{rel}", env!("CARGO_MANIFEST_DIR"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn validate_accepts_the_example_instance() {
    let out = bin()
        .args(["validate", "--instance", &repo_path("instances/demo.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("instance valid"));
    assert!(text.contains("domain certified"));
}

#[test]
fn malformed_files_exit_with_code_two_and_one_line() {
    let out = bin()
        .args(["validate", "--instance", &fixture("bad.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error:"));
}

#[test]
fn evaluate_reports_the_tail_average() {
    let out = bin()
        .args([
            "evaluate",
            "--instance",
            &repo_path("instances/demo.json"),
            "--measure",
            "CVaR:alpha=0.5",
            "0.5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("risk value = 2.5"));
}

#[test]
fn solve_oracle_finds_the_known_optimum() {
    let out = bin()
        .args(["solve", "--instance", &repo_path("instances/demo.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("optimal value = 1"), "got: {text}");
    assert!(text.contains("x* = 0"), "got: {text}");
}

#[test]
fn solve_by_path_agrees_with_the_oracle() {
    let out = bin()
        .args([
            "solve",
            "--method",
            "path",
            "--instance",
            &repo_path("instances/demo.json"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let value: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("optimal value = "))
        .expect("value line")
        .parse()
        .unwrap();
    assert!((value - 1.0).abs() <= 1e-6, "got {value}");
}

#[test]
fn solve_by_grid_agrees_with_the_oracle() {
    let out = bin()
        .args([
            "solve",
            "--method",
            "grid",
            "--instance",
            &repo_path("instances/demo.json"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("optimal value = 1"));
}

#[test]
fn path_prints_a_csv_trace() {
    let out = bin()
        .args(["path", "--instance", &repo_path("instances/demo.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("eps,objective,comp_residual"), "got: {text}");
    assert!(text.contains("final objective = "));
}

#[test]
fn stability_reports_the_value_gap() {
    let out = bin()
        .args([
            "stability",
            "--instance",
            &repo_path("instances/demo.json"),
            "--family",
            "escaping",
            "--ls",
            "2,10,100",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("l,value,argmin_sample,verdict"));
    assert!(text.contains("gap("), "got: {text}");
    assert!(text.contains("limit,"), "got: {text}");
}

#[test]
fn stability_accepts_a_family_file() {
    let out = bin()
        .args([
            "stability",
            "--instance",
            &repo_path("instances/demo.json"),
            "--family-file",
            &repo_path("instances/family_clipped.json"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("verdict converges"));
}

#[test]
fn bases_dumps_the_catalog() {
    let out = bin()
        .args(["bases", "--instance", &repo_path("instances/demo.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("catalog: "));
    assert!(text.contains("columns = ["));
}

#[test]
fn genericity_reports_a_zero_fraction() {
    let out = bin()
        .args([
            "genericity",
            "--instance",
            &repo_path("instances/demo.json"),
            "0.5",
            "--trials",
            "50",
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("fraction = 0"));
}

#[test]
fn solver_failures_exit_with_code_one() {
    let out = bin()
        .args(["solve", "--instance", &fixture("infeasible.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "stdout: {}", stdout(&out));
}

#[test]
fn unknown_measures_exit_with_code_two() {
    let out = bin()
        .args([
            "evaluate",
            "--instance",
            &repo_path("instances/demo.json"),
            "--measure",
            "XX",
            "0.5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pessimistic_oracle_requests_exit_with_code_two() {
    let out = bin()
        .args(["solve", "--instance", &fixture("pessimistic.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("grid"));
}

#[test]
fn pessimistic_grid_solve_succeeds() {
    let out = bin()
        .args([
            "solve",
            "--method",
            "grid",
            "--instance",
            &fixture("pessimistic.json"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("optimal value = 1"));
}
