// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ea_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ea-lab"))
        .args(args)
        .env_remove("EA_LAB_JOBS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

const TINY: &str = r#"{
  "task": "N3T1",
  "model": {"context_len": 4, "kernel": "ea"},
  "train": {"epochs": 12, "n_runs": 2, "eval_every": 4, "n_test_during": 4,
            "n_gen_during": 4, "n_test_final": 8, "n_gen_final": 8}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn cycles_reports_exact_decomposition() {
    let v = stdout_json(&ea_lab(&["cycles", "N16T3"]));
    assert_eq!(v["total"], 65536);
    assert_eq!(v["cycles"], serde_json::json!([[120, 512], [60, 64], [30, 8], [15, 1], [1, 1]]));
    let v = stdout_json(&ea_lab(&["cycles", "N2T5"]));
    assert_eq!(v["cycles"], serde_json::json!([[63, 1], [1, 1]]));
}

#[test]
fn cycles_prints_mean_on_stderr() {
    let out = ea_lab(&["cycles", "N16T2-S"]);
    let v = stdout_json(&out);
    assert_eq!(v["total"], 4096);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("23.8"), "{err}");
}

#[test]
fn cycles_respects_state_cap() {
    let out = ea_lab(&["cycles", "N16T5", "--state-cap", "1000"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn params_counts() {
    let v = stdout_json(&ea_lab(&["params", "--basis", "2", "--context-len", "16", "--json"]));
    assert_eq!(v["total"], 132);
    let v = stdout_json(&ea_lab(&[
        "params",
        "--basis",
        "16",
        "--context-len",
        "128",
        "--sharing",
        "per-position",
        "--json",
    ]));
    assert_eq!(v["total"], 436_304);
    let sum: u64 = v["breakdown"].as_array().unwrap().iter().map(|r| r[1].as_u64().unwrap()).sum();
    assert_eq!(sum, 436_304);
    let out = ea_lab(&["params", "--preset", "fig3_ea"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().last().unwrap().ends_with("1002"), "{text}");
}

#[test]
fn train_eval_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let out = ea_lab(&["train", "--config", &cfg, "--output", run.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metrics.csv", "aggregate.csv", "final_eval.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,5,0,N3T1,"));

    let ckpt = run.join("checkpoints/run_000.json");
    let v = stdout_json(&ea_lab(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--task",
        "N3T1",
        "--series",
        "20",
        "--gen",
        "10",
    ]));
    assert_eq!(v["result"]["n_series"], 20);
    let acc = v["result"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let attn = dir.path().join("attn");
    let v = stdout_json(&ea_lab(&[
        "attn-dump",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--context",
        "0,1,2,0",
        "--output",
        attn.to_str().unwrap(),
    ]));
    assert!(v["min_log10"].as_f64().unwrap() <= 0.0);
    let weights = fs::read_to_string(attn.join("attention.csv")).unwrap();
    for (m, line) in weights.lines().enumerate() {
        let row: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row[m + 1..].iter().all(|&x| x == 0.0));
    }
    let logs = fs::read_to_string(attn.join("attention_log10.csv")).unwrap();
    let first: Vec<f64> = logs.lines().next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(&first[1..], &[-12.0, -12.0, -12.0]);
}

#[test]
fn train_is_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(ea_lab(&["train", "--config", &cfg, "--output", a.to_str().unwrap()]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_ea-lab"))
        .args(["train", "--config", &cfg, "--output", b.to_str().unwrap(), "--runs", "2"])
        .env("EA_LAB_JOBS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn oracle_eval_is_perfect() {
    let v = stdout_json(&ea_lab(&["eval", "--oracle", "--task", "N16T2-R", "--series", "50", "--gen", "40"]));
    assert_eq!(v["result"]["accuracy"], 1.0);
    assert_eq!(v["result"]["n_correct"], 2000);
}

#[test]
fn gradcheck_passes_on_presets_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let v = stdout_json(&ea_lab(&["gradcheck", "--config", &cfg, "--seeds", "2"]));
    assert_eq!(v["pass"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 2);
}

#[test]
fn presets_listing_and_lookup() {
    let out = ea_lab(&["presets"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["fig2_ea_c32", "fig3_dpa", "fig4_ea", "fig5_mixture", "fig6_ea_c128"] {
        assert!(text.contains(name), "{name}");
    }
    let out = ea_lab(&["presets", "fig5_mixture"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["train"]["lr_schedule"], serde_json::json!([{"epoch": 2500, "multiplier": 0.25}]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{"task": "N3T1", "model": {"context_len": 4, "kernel": "ea", "extra": 1}}"#);
    assert_eq!(ea_lab(&["train", "--config", &bad]).status.code(), Some(2));
    assert_eq!(ea_lab(&["train", "--config", "/nonexistent/cfg.json"]).status.code(), Some(4));

    let diverging = write_config(
        dir.path(),
        r#"{"task": "N3T1", "model": {"context_len": 4, "kernel": "dpa"},
            "train": {"epochs": 5, "n_runs": 2, "lr": 50.0, "loss_reduction": "sum",
                      "n_test_final": 2, "n_gen_final": 2}}"#,
    );
    let out_dir = dir.path().join("div");
    let out = ea_lab(&["train", "--config", &diverging, "--output", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let fe: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("final_eval.json")).unwrap()).unwrap();
    assert_eq!(fe["diverged_runs"], 2);

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = ea_lab(&["train", "--config", &cfg, "--output", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}
