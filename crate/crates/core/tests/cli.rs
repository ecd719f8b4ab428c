use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cvae-nf");

const TINY: &str = r#"{
  "n_synthetic": 48,
  "height": 8,
  "width": 8,
  "latent_dim": 4,
  "enc_channels": [4, 4, 4, 4],
  "label_channels": [2, 2],
  "flow_hidden": 8,
  "batch_size": 16,
  "max_epochs": 2,
  "fid_grid": 2
}"#;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn assert_json_error(out: &Output, kind: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], kind, "{err}");
}

#[test]
fn help_lists_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["make-synth", "train", "eval", "sample"] {
        assert!(text.contains(cmd), "{text}");
        let sub = run(&[cmd, "--help"], dir.path());
        assert!(sub.status.success());
        assert!(String::from_utf8_lossy(&sub.stdout).contains("Usage"));
    }
}

#[test]
fn malformed_config_fails_every_command() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"latent_dim": "many"}"#).unwrap();
    std::fs::write(dir.path().join("unknown.json"), r#"{"colour": 1}"#).unwrap();
    for cfg in ["bad.json", "unknown.json"] {
        for cmd in ["make-synth", "train", "eval", "sample"] {
            let mut args = vec![cmd, "--config", cfg];
            if cmd == "sample" {
                args.extend(["--attrs", "is_red"]);
            }
            assert_json_error(&run(&args, dir.path()), "config");
        }
    }
    let out = run(&["train", "--config", "missing.json"], dir.path());
    assert_json_error(&out, "io");
}

#[test]
fn train_eval_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();

    let report = stdout_json(&run(
        &["train", "--config", "tiny.json", "--out-dir", "r1", "--seed", "3"],
        d,
    ));
    assert_eq!(report["setting"], "sigma_nf");
    assert_eq!(report["seed"], 3);
    let history = std::fs::read_to_string(d.join("r1/history.jsonl")).unwrap();
    assert_eq!(
        history.lines().count() as u64,
        report["evaluations"].as_u64().unwrap()
    );
    for line in history.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "total", "recon", "kl", "sigma_sq", "test_nll"] {
            assert!(rec.get(key).is_some(), "{key} missing in {line}");
        }
    }
    // the echo materializes every default and the command-line overrides
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r1/config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 3);
    assert_eq!(echo["optimizer"], "adam");
    assert_eq!(echo["attr_names"].as_array().unwrap().len(), 5);

    let metrics = stdout_json(&run(&["eval", "--out-dir", "r1"], d));
    for key in ["test_nll", "fid_recon", "fid_sampled"] {
        assert!(metrics[key].as_f64().unwrap().is_finite(), "{metrics}");
    }
    assert_eq!(metrics["setting"], "sigma_nf");
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["test_nll"], report["best_test_nll"]);

    let grid = stdout_json(&run(
        &[
            "sample",
            "--out-dir",
            "r1",
            "--attrs",
            "is_red,has_border",
            "--attrs",
            "0,1,0,1,0",
            "--cols",
            "3",
            "--through-flow",
        ],
        d,
    ));
    assert_eq!(grid["rows"], 2);
    let img = image::open(d.join("r1/samples.png")).unwrap();
    assert_eq!((img.width(), img.height()), (24, 16));

    let bad = run(&["sample", "--out-dir", "r1", "--attrs", "is_blue"], d);
    assert_json_error(&bad, "attributes");
    let missing = run(&["eval", "--out-dir", "nowhere"], d);
    assert_json_error(&missing, "io");
}

#[test]
fn make_synth_then_train_from_folder() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    let made = stdout_json(&run(
        &["make-synth", "--config", "tiny.json", "--out-dir", "ds"],
        d,
    ));
    assert_eq!(made["images"], 48);
    assert!(d.join("ds/list_attr.txt").exists());
    assert!(d.join("ds/000048.png").exists());
    let report = stdout_json(&run(
        &[
            "train",
            "--config",
            "ds/config.json",
            "--out-dir",
            "r",
            "--setting",
            "gaussian",
        ],
        d,
    ));
    assert_eq!(report["setting"], "gaussian");
    let echo = std::fs::read_to_string(d.join("r/config.json")).unwrap();
    assert!(echo.contains("\"folder\""));
}
