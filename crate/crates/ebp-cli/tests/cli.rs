//! End-to-end tests of the `ebp` binary: flag handling, exit codes, output
//! schemas, and cross-invocation determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ebp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ebp"))
}

fn run(args: &[&str]) -> Output {
    ebp().args(args).output().expect("binary should run")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal exit")
}

/// Value of a `key = value` line.
fn value_of<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| {
            l.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(" = "))
        })
        .unwrap_or_else(|| panic!("missing key `{key}` in:\n{stdout}"))
}

fn float_of(stdout: &str, key: &str) -> f64 {
    value_of(stdout, key)
        .parse()
        .unwrap_or_else(|_| panic!("key `{key}` is not a number"))
}

#[test]
fn spectral_brownian_prints_exact_values() {
    let out = run(&["spectral", "--builtin", "brownian"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    assert_eq!(value_of(&text, "mu"), "4");
    assert_eq!(value_of(&text, "hurst_h"), "0.5");
    assert_eq!(value_of(&text, "fixed_point_a"), "0.5");
    assert_eq!(value_of(&text, "left_u"), "0.5 0.5");
    assert_eq!(value_of(&text, "right_v"), "1 1");
    assert_eq!(value_of(&text, "assumptions"), "pass");
}

#[test]
fn spectral_asymmetric_prints_exact_values() {
    let out = run(&["spectral", "--builtin", "asymmetric"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    assert_eq!(value_of(&text, "mu_plus"), "4");
    assert!((float_of(&text, "fixed_point_a") - 0.375).abs() < 1e-12);
    assert!((float_of(&text, "mu") - 24.0 / 7.0).abs() < 1e-12);
    assert!((float_of(&text, "mu_minus") - 20.0 / 7.0).abs() < 1e-12);
}

#[test]
fn spectral_degenerate_model_exits_three() {
    let out = run(&["spectral", "--builtin", "binary-cascade"]);
    assert_eq!(exit_code(&out), 3);
    let text = stdout_of(&out);
    assert_eq!(value_of(&text, "degenerate_straight_line"), "true");
    assert_eq!(value_of(&text, "a1_status"), "fail");
    assert_eq!(value_of(&text, "assumptions"), "fail");
    assert!(stderr_of(&out).contains("degenerate"));
}

#[test]
fn spectral_config_file_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ini");
    fs::write(
        &path,
        "[orientation_law]\nfamily = geometric\np = 0.5\n\n\
         [weight_law]\nmode = iid\nfamily = gamma\nshape = 3\nscale = 1\n",
    )
    .unwrap();
    let from_file = run(&["spectral", "--model", path.to_str().unwrap()]);
    let from_builtin = run(&["spectral", "--builtin", "brownian-gamma"]);
    assert_eq!(exit_code(&from_file), 0);
    let drop_label = |out: &Output| {
        stdout_of(out)
            .lines()
            .skip(1)
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(drop_label(&from_file), drop_label(&from_builtin));
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.ini");
    fs::write(
        &path,
        "[orientation_law]\nfamily = geometric\np = abc\n\n[weight_law]\nmode = constant\n",
    )
    .unwrap();
    let out = run(&["spectral", "--model", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("line 3"));
}

#[test]
fn model_selection_is_exclusive() {
    let neither = run(&["spectral"]);
    assert_eq!(exit_code(&neither), 2);
    let both = run(&["spectral", "--builtin", "brownian", "--model", "x.ini"]);
    assert_eq!(exit_code(&both), 2);
    let unknown = run(&["spectral", "--builtin", "no-such-model"]);
    assert_eq!(exit_code(&unknown), 2);
    assert!(stderr_of(&unknown).contains("brownian"));
}

#[test]
fn simulate_emits_unit_crossings_at_integer_times() {
    let out = run(&[
        "simulate",
        "--builtin",
        "brownian",
        "--steps",
        "5",
        "--seed",
        "1",
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for (i, line) in lines.iter().enumerate() {
        let k = i + 1;
        assert!(
            line.starts_with(&format!("{{\"k\":{k},\"t\":{k}.0,")),
            "line {k} = {line}"
        );
        assert!(line.ends_with("\"d\":1.0}"), "line {k} = {line}");
    }
}

#[test]
fn simulate_is_deterministic_and_logging_stays_on_stderr() {
    let args = [
        "simulate",
        "--builtin",
        "persistent",
        "--steps",
        "200",
        "--seed",
        "42",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(first.stdout, second.stdout);
    let debug = ebp()
        .args(args)
        .env("EBP_LOG", "debug")
        .output()
        .expect("binary should run");
    assert_eq!(first.stdout, debug.stdout);
    assert!(stderr_of(&debug).contains("debug:"));
}

#[test]
fn simulate_csv_has_header_row() {
    let out = run(&[
        "simulate",
        "--builtin",
        "brownian",
        "--steps",
        "3",
        "--seed",
        "1",
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,t,y,o,d");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], "1,1,1,+,1");
}

#[test]
fn simulate_requires_a_seed() {
    let out = run(&["simulate", "--builtin", "brownian", "--steps", "5"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("--seed"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let full = p("full.ndjson");
    let part1 = p("part1.ndjson");
    let part2 = p("part2.ndjson");
    let snap = p("snap.json");

    let base = ["simulate", "--builtin", "brownian-gamma", "--seed", "7"];
    let mut args: Vec<&str> = base.to_vec();
    args.extend(["--steps", "30", "--out", &full]);
    assert_eq!(exit_code(&run(&args)), 0);

    let mut args: Vec<&str> = base.to_vec();
    args.extend(["--steps", "12", "--out", &part1, "--snapshot", &snap]);
    assert_eq!(exit_code(&run(&args)), 0);

    let out = run(&[
        "simulate", "--resume", &snap, "--steps", "18", "--out", &part2,
    ]);
    assert_eq!(exit_code(&out), 0);

    let mut joined = fs::read(&part1).unwrap();
    joined.extend(fs::read(&part2).unwrap());
    assert_eq!(joined, fs::read(&full).unwrap());
}

#[test]
fn resume_rejects_fresh_run_flags() {
    let out = run(&[
        "simulate",
        "--resume",
        "snap.json",
        "--steps",
        "5",
        "--seed",
        "1",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn replicas_partition_output_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("runs.ndjson");
    let out = run(&[
        "simulate",
        "--builtin",
        "asymmetric",
        "--steps",
        "6",
        "--seed",
        "5",
        "--replicas",
        "3",
        "--out",
        base.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    for r in 0..3 {
        assert!(dir.path().join(format!("runs.r{r}.ndjson")).exists());
    }

    let single = dir.path().join("single.ndjson");
    let out = run(&[
        "simulate",
        "--builtin",
        "asymmetric",
        "--steps",
        "6",
        "--seed",
        "6",
        "--out",
        single.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(
        fs::read(dir.path().join("runs.r1.ndjson")).unwrap(),
        fs::read(&single).unwrap()
    );
}

#[test]
fn replicas_require_an_output_file() {
    let out = run(&[
        "simulate",
        "--builtin",
        "brownian",
        "--steps",
        "5",
        "--seed",
        "1",
        "--replicas",
        "2",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("--out"));
}

fn simulate_to(path: &Path, steps: &str, seed: &str) {
    let out = run(&[
        "simulate",
        "--builtin",
        "brownian",
        "--steps",
        steps,
        "--seed",
        seed,
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
}

#[test]
fn analyze_recovers_branching_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.ndjson");
    simulate_to(&data, "20000", "3");
    let out = run(&["analyze", data.to_str().unwrap(), "--builtin", "brownian"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    assert_eq!(value_of(&text, "records"), "20000");
    assert_eq!(value_of(&text, "mu_source"), "model");
    let mean_z = float_of(&text, "pooled_mean_z");
    assert!((mean_z - 4.0).abs() < 0.2, "pooled mean Z = {mean_z}");
    let shift = float_of(&text, "shift_per_level");
    let predicted = float_of(&text, "predicted_shift");
    assert!((predicted - 4.0f64.ln()).abs() < 1e-12);
    assert!((shift - predicted).abs() < 0.2, "shift = {shift}");
    assert!(text.lines().any(|l| l.starts_with("# level ")));
}

#[test]
fn analyze_without_model_estimates_mu() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.ndjson");
    simulate_to(&data, "5000", "9");
    let out = run(&["analyze", data.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    assert_eq!(value_of(&text, "mu_source"), "estimated");
    assert_eq!(float_of(&text, "mu"), float_of(&text, "pooled_mean_z"));
}

#[test]
fn analyze_malformed_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("broken.ndjson");
    fs::write(
        &data,
        "{\"k\":1,\"t\":1.0,\"y\":1,\"o\":\"+\",\"d\":1.0}\ngarbage\n",
    )
    .unwrap();
    let out = run(&["analyze", data.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("line 2"));
}

#[test]
fn validate_accepts_matching_model() {
    let out = run(&[
        "validate",
        "--builtin",
        "brownian",
        "--depth",
        "3",
        "--steps",
        "8",
        "--replicas",
        "50",
        "--trees",
        "50",
        "--seed",
        "5",
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    assert_eq!(value_of(&text, "verdict"), "pass");
    assert_eq!(value_of(&text, "z"), "0");
}

#[test]
fn validate_accepts_matching_random_weight_model() {
    let out = run(&[
        "validate",
        "--builtin",
        "brownian-gamma",
        "--depth",
        "4",
        "--steps",
        "16",
        "--replicas",
        "500",
        "--trees",
        "500",
        "--seed",
        "991",
    ]);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(value_of(&stdout_of(&out), "verdict"), "pass");
}

#[test]
fn validate_flags_mismatched_model() {
    let out = run(&[
        "validate",
        "--builtin",
        "brownian-gamma",
        "--oracle-builtin",
        "brownian",
        "--depth",
        "4",
        "--steps",
        "16",
        "--replicas",
        "500",
        "--trees",
        "500",
        "--seed",
        "992",
    ]);
    assert_eq!(exit_code(&out), 4);
    let text = stdout_of(&out);
    assert_eq!(value_of(&text, "verdict"), "fail");
    assert!(float_of(&text, "z").abs() > 3.0);
    assert!(stderr_of(&out).contains("standard errors"));
}

#[test]
fn validate_rejects_impossible_capacity() {
    let out = run(&[
        "validate",
        "--builtin",
        "brownian",
        "--depth",
        "2",
        "--steps",
        "5",
        "--seed",
        "1",
    ]);
    assert_eq!(exit_code(&out), 2);
}
