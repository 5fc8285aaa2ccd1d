//! End-to-end CLI tests: exit codes, artifact formats, worker-count and
//! rerun determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rsjd")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rsjd-cli-{tag}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_benchmark_model(dir: &Path) -> PathBuf {
    let path = dir.join("model.json");
    fs::write(
        &path,
        r#"{
            "d": 1, "n0": 2, "eps0": 1.0, "H": 1.5, "qbar": 1.5, "lambda0": 0.5,
            "rho": {"kind": "linear"},
            "model": {"kind": "two_regime_benchmark", "jump_rate": 1.0}
        }"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn missing_model_file_exits_2() {
    let out = run(&["simulate", "--model", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn zero_paths_exits_2_with_message() {
    let dir = workdir("zero-paths");
    let model = write_benchmark_model(&dir);
    let out = run(&["simulate", "--model", model.to_str().unwrap(), "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_paths must be >= 1"), "{}", stderr(&out));
}

#[test]
fn unknown_command_is_rejected() {
    let out = run(&["frobnicate"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn simulate_writes_paths_csv_with_meta() {
    let dir = workdir("simulate");
    let model = write_benchmark_model(&dir);
    let out = run(&[
        "simulate",
        "--model",
        model.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        "50",
        "--t",
        "0.5",
        "--h",
        "0.01",
        "--dump-paths",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("paths.csv")).unwrap();
    let mut lines = csv.lines();
    let meta = lines.next().unwrap();
    assert!(meta.starts_with("# config_hash=") && meta.contains("version="));
    assert_eq!(
        lines.next().unwrap(),
        "path_id,t,x_1,regime,event_kind,event_payload"
    );
    assert!(csv.lines().count() > 10);
}

#[test]
fn verify_suite_passes_and_report_round_trips() {
    let dir = workdir("verify");
    let model = write_benchmark_model(&dir);
    let out = run(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
        "--suite",
        "all",
        "--n",
        "600",
        "--t",
        "1.0",
        "--h",
        "0.01",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));
    let verdicts = dir.join("verdicts.jsonl");
    let text = fs::read_to_string(&verdicts).unwrap();
    let n_lines = text.lines().count();
    assert!((10..=16).contains(&n_lines), "suite emitted {n_lines} verdicts");

    let rep = run(&["report", verdicts.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(0), "{}", stderr(&rep));
    assert!(stdout(&rep).contains("0 failed"));
}

#[test]
fn report_empty_file_exits_2_and_mixed_exits_1() {
    let dir = workdir("report");
    let empty = dir.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = run(&["report", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no checks"));

    let mixed = dir.join("mixed.jsonl");
    fs::write(
        &mixed,
        concat!(
            r#"{"check":"a","anchor":"x","statistic":0.1,"se":0.05,"threshold":0.2,"pass":true,"h":0.001,"n":10,"seed":1,"runtime_ms":3,"config_hash":"aa","version":"0.1.0"}"#,
            "\n",
            r#"{"check":"b","anchor":"y","statistic":0.5,"se":0.05,"threshold":0.2,"pass":false,"h":0.001,"n":10,"seed":1,"runtime_ms":3,"config_hash":"aa","version":"0.1.0"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = run(&["report", mixed.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn couple_and_resolvent_write_reports() {
    let dir = workdir("couple");
    let model = write_benchmark_model(&dir);
    let out = run(&[
        "couple",
        "--model",
        model.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        "200",
        "--t",
        "0.5",
        "--h",
        "0.005",
        "--x0",
        "0.5",
        "--z0",
        "0.0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let coupling = fs::read_to_string(dir.join("coupling.csv")).unwrap();
    assert!(coupling.contains("t,mean_dist,se,analytic_bound,n_paths"));
    let tail = fs::read_to_string(dir.join("coupling_tail.csv")).unwrap();
    assert!(tail.contains("t,surv_emp,se,tail_bound"));

    let out = run(&[
        "resolvent",
        "--model",
        model.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        "200",
        "--h",
        "0.01",
        "--methods",
        "direct,pieced",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let res = fs::read_to_string(dir.join("resolvent.csv")).unwrap();
    assert!(res.contains("alpha,method,estimate,se,residual_bound,runtime_ms"));
    assert_eq!(res.lines().count(), 4); // meta + header + 2 methods
}

/// Strip fields that legitimately vary between runs (wall-clock runtimes).
fn normalized_jsonl(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("runtime_ms");
            v
        })
        .collect()
}

#[test]
fn outputs_do_not_depend_on_worker_count_or_rerun() {
    let dir = workdir("determinism");
    let model = write_benchmark_model(&dir);
    let mut outputs = Vec::new();
    for (tag, workers) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let sub = dir.join(tag);
        fs::create_dir_all(&sub).unwrap();
        let out = run(&[
            "verify",
            "--model",
            model.to_str().unwrap(),
            "--seed",
            "11",
            "--workers",
            workers,
            "--out",
            sub.to_str().unwrap(),
            "--n",
            "400",
            "--t",
            "0.5",
            "--h",
            "0.01",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        outputs.push(fs::read_to_string(sub.join("verdicts.jsonl")).unwrap());
    }
    let a = normalized_jsonl(&outputs[0]);
    let b = normalized_jsonl(&outputs[1]);
    let c = normalized_jsonl(&outputs[2]);
    assert_eq!(a, b, "worker count changed the verdicts");
    assert_eq!(a, c, "rerun changed the verdicts");
}

#[test]
fn config_file_fields_are_overridden_by_flags() {
    let dir = workdir("config");
    let model = write_benchmark_model(&dir);
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        format!(
            r#"{{
                "model": "{}",
                "seed": 9,
                "out": "{}",
                "simulate": {{"n": 30, "t": 0.25, "h": 0.01, "dump_paths": 1}}
            }}"#,
            model.display(),
            dir.display()
        ),
    )
    .unwrap();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--n", "40"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("simulated 40 paths"), "{}", stdout(&out));
    assert!(stdout(&out).contains("t=0.25"));
}
