//! Command-line contract: exit codes, run directories and sweep output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lizard() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lizard"));
    c.env("LIZARD_THREADS", "1");
    c
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(args: &[&str]) -> Output {
    lizard().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["distill", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&run(&["linearize"])), 2);
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = run(&["distill"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
    let o = run(&["distill", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[model]\nd_model = \"wide\"\n").unwrap();
    assert_eq!(code(&run(&["distill", "--config", p.to_str().unwrap()])), 2);
}

#[test]
fn failed_run_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = run(&[
        "eval-passkey",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        "/nonexistent/model.lzrd",
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn finetune_writes_a_sealed_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ft");
    let cfg = smoke_config();
    let args = ["finetune", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--window", "4"];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "config.json",
        "teacher.lzrd",
        "teacher_trace.csv",
        "student_stage1.lzrd",
        "stage1_trace.csv",
        "stage1_metrics.json",
        "student.lzrd",
        "stage2_trace.csv",
        "stage2_metrics.json",
        "manifest.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let snapshot: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["model"]["swa"]["window"], 4, "flag overrides the config file");
    let trace = std::fs::read_to_string(out.join("stage2_trace.csv")).unwrap();
    assert!(trace.starts_with("step,lr,loss,grad_norm\n"));
    assert_eq!(trace.lines().count(), 5);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["content_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["files"]["student.lzrd"].is_string());

    // a completed run directory is never reused
    let again = run(&args);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("completed run"));

    // the student checkpoint feeds passkey evaluation
    let ev = dir.path().join("ev");
    let o = run(&[
        "eval-passkey",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        out.join("student.lzrd").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = std::fs::read_to_string(ev.join("passkey_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 2 * 10);
}

#[test]
fn same_config_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let hashes: Vec<serde_json::Value> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            let o = run(&["distill", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
            m["files"]["student_stage1.lzrd"].clone()
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn sweep_grid_gives_twelve_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let cfg = smoke_config();
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "1",
        "--grid",
        "w=32,64,128,256",
        "m=2,4,6",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    let cells: Vec<(String, String)> = rows
        .iter()
        .map(|row| (row[col("window")].to_string(), row[col("meta")].to_string()))
        .collect();
    assert_eq!(cells[0], ("32".into(), "2".into()));
    assert_eq!(cells[11], ("256".into(), "6".into()));
}

#[test]
fn sweep_rejects_unknown_axis_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("s").to_str().unwrap(),
        "--grid",
        "depth=1,2",
    ]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("s").exists());
}

#[test]
fn bench_kernel_emits_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bk");
    let cfg = smoke_config();
    let o = run(&["bench-kernel", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--lengths", "128,256,512"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("kernel.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "kind,L,batch,ms_median,ms_p10,ms_p90,peak_floats,tok_per_s"
    );
    // chunkwise, parallel and softmax at three lengths
    assert_eq!(text.lines().count(), 1 + 9);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("kernel.json")).unwrap()).unwrap();
    assert_eq!(summary["timing"]["warmups"], 2);
    assert_eq!(summary["timing"]["trials"], 5);
}

#[test]
fn bench_generate_reports_flat_student_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bg");
    let cfg = smoke_config();
    let o = run(&["bench-generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("generate.json")).unwrap()).unwrap();
    assert_eq!(summary["extra"]["lizard_constant_floats"], true);
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(smoke_config()).unwrap();
    let cfg = lizard::pipeline::RunConfig::from_toml(&text).unwrap();
    let p = dir.path().join("run.json");
    std::fs::write(&p, cfg.snapshot().unwrap()).unwrap();
    let out = dir.path().join("pt");
    let o = run(&["pretrain-teacher", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("teacher.lzrd").is_file());
}
