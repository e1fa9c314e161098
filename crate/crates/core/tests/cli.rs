use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qcmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcmm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_inputs(dir: &Path) -> (String, String) {
    let synth = dir.join("synth.json");
    fs::write(&synth, r#"{"n_per_class": 10, "d": 4}"#).unwrap();
    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{"d": 4, "hidden": 6, "blocks": 1, "epochs": 2, "batch_size": 8}"#,
    )
    .unwrap();
    (synth.display().to_string(), config.display().to_string())
}

#[test]
fn train_then_eval_then_fuse_demo() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, config) = write_inputs(dir.path());
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    let o = qcmm(&["train", "--config", &config, "--synthetic", &synth, "--out", &run_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("OA"));
    for f in ["metrics.json", "checkpoint.qcmm", "history.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,mean_loss\n"));
    assert_eq!(history.lines().count(), 3);

    let ck = run.join("checkpoint.qcmm").display().to_string();
    let o = qcmm(&["eval", "--checkpoint", &ck, "--synthetic", &synth]);
    assert!(o.status.success());
    let evaluated: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let trained: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(evaluated, trained);

    let o = qcmm(&["fuse-demo", "--checkpoint", &ck, "--samples", "10"]);
    assert!(o.status.success());
    let demo: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(demo["thetas"].as_array().unwrap().len(), 4);
    assert!(demo["max_abs_diff"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn ablate_writes_the_same_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, config) = write_inputs(dir.path());
    let run = dir.path().join("lidar");
    let o = qcmm(&[
        "ablate",
        "--config",
        &config,
        "--synthetic",
        &synth,
        "--out",
        &run.display().to_string(),
        "--mode",
        "lidar-only",
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("lidar-only"));
    assert!(run.join("metrics.json").exists());
}

#[test]
fn paramcount_reports_the_breakdown() {
    let o = qcmm(&["paramcount"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["fusion"], 8);
    assert_eq!(v["fusion_gate_count"], 8);
    assert_eq!(v["total_quantum"], 42);
    assert_eq!(v["mlp_total"], 2192);
    let o = qcmm(&["paramcount", "--kernel", "SO4"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total_quantum"], 24);
}

#[test]
fn gradcheck_passes_for_one_kernel() {
    let o = qcmm(&["gradcheck", "--kernel", "SO4"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(qcmm(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(qcmm(&[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.qcmm").display().to_string();
    let synth = write_inputs(dir.path()).0;
    let o = qcmm(&["eval", "--checkpoint", &missing, "--synthetic", &synth]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}
