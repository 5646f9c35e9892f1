//! End-to-end tests of the `gates` binary: argument handling, exit
//! codes, and a miniature train -> eval -> prune -> report pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn gates() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gates"))
}

fn run(args: &[&str]) -> Output {
    gates().args(args).output().expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code (killed by signal?)")
}

/// Minimal synthetic-task config: four classes, a handful of samples,
/// two epochs. Exists to exercise plumbing, not to converge.
fn mini_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "seed": 3,
  "epochs": 2,
  "batch_size": 16,
  "lr": 0.05,
  "lr_decay_factor": 0.1,
  "lr_step_epochs": [1],
  "momentum": 0.9,
  "weight_decay": 1e-4,
  "wd_gate_multiplier": 20.0,
  "target_rate": 0.5,
  "loss_kind": "batch",
  "gate_kind": "independent",
  "gate_granularity": "channel",
  "gate_init_p": 0.8,
  "temperature": 1.0,
  "dataset": {{ "kind": "synthetic", "num_classes": 4, "samples_per_class": 8,
                "image_size": 16, "noise_sigma": 0.1, "seed": 5 }},
  "out_dir": {out:?}
}}"#,
        out = out_dir.display().to_string()
    )
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"][..], &["train", "--help"][..]] {
        let out = run(args);
        assert_eq!(code(&out), 0, "args {args:?}: {}", stderr(&out));
    }
    assert!(stdout(&run(&["--help"])).contains("prune"));
}

#[test]
fn unknown_arguments_exit_one() {
    for args in [
        &["frobnicate"][..],
        &["train"][..],                       // missing --config
        &["eval", "--checkpoint", "x"][..],   // missing --data/--strategy
        &["train", "--config", "x", "--bogus"][..],
    ] {
        let out = run(args);
        assert_eq!(code(&out), 1, "args {args:?} should fail argument parsing");
    }
}

#[test]
fn bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");

    // Config file that does not exist.
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    // Config with an unknown key (strict parsing).
    std::fs::write(&cfg, r#"{"seed": 1, "oops": true}"#).unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("error"));

    // Checkpoint that does not exist.
    let out = run(&["report", "--checkpoint", dir.path().join("no.ckpt").to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    // Tau outside [0, 1] is rejected before any file is touched.
    let out = run(&["prune", "--checkpoint", "x.ckpt", "--tau", "1.5", "--verify", "4"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("tau"));

    // A data descriptor that is neither JSON nor a file.
    let ckpt = dir.path().join("absent.ckpt");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", "nope", "--strategy", "all-on"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_thread_cap_exits_one() {
    let out = gates()
        .args(["--help"])
        .env("GATES_THREADS", "zero")
        .output()
        .unwrap();
    // --help parses first; a bad env var only matters once a command runs.
    assert_eq!(code(&out), 0);

    let out = gates()
        .args(["report", "--checkpoint", "missing.ckpt"])
        .env("GATES_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("GATES_THREADS"));
}

#[test]
fn train_eval_prune_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("mini.json");
    let run_dir = dir.path().join("run");
    std::fs::write(&cfg_path, mini_config(&run_dir)).unwrap();

    // Train; --seed overrides the config's seed.
    let out = gates()
        .args(["train", "--config", cfg_path.to_str().unwrap(), "--seed", "11"])
        .env("GATES_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    let line: serde_json::Value = serde_json::from_str(stdout(&out).lines().last().unwrap()).unwrap();
    let final_ckpt = line["final_checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&final_ckpt).exists());
    assert!(run_dir.join("summary.json").exists());
    assert!(run_dir.join("metrics.csv").exists());

    // Eval with an inline dataset descriptor, all four strategies.
    let data = r#"{"kind":"synthetic","num_classes":4,"samples_per_class":8,"image_size":16,"noise_sigma":0.1,"seed":5}"#;
    for strategy in ["stochastic", "threshold", "all-on", "ensemble"] {
        let out = run(&["eval", "--checkpoint", &final_ckpt, "--data", data, "--strategy", strategy]);
        assert_eq!(code(&out), 0, "eval {strategy} failed: {}", stderr(&out));
        let v: serde_json::Value = serde_json::from_str(stdout(&out).lines().last().unwrap()).unwrap();
        let top1 = v["top1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&top1));
        assert!(v["mean_flops"].as_f64().unwrap() > 0.0);
    }

    // Prune at the default threshold and verify.
    let pruned_path = dir.path().join("pruned.ckpt");
    let out = run(&[
        "prune",
        "--checkpoint", &final_ckpt,
        "--tau", "0.5",
        "--verify", "8",
        "--out", pruned_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "prune failed: {}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(stdout(&out).lines().last().unwrap()).unwrap();
    assert_eq!(v["pass"], serde_json::Value::Bool(true));
    assert!(pruned_path.exists());

    // Report prints a CSV with one row per conv layer plus floor/total.
    let out = run(&["report", "--checkpoint", &final_ckpt]);
    assert_eq!(code(&out), 0, "report failed: {}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "layer_id,cin,cout,kh,kw,hout,wout,max_flops,expected_flops"
    );
    let body: Vec<&str> = lines.collect();
    assert!(body.iter().any(|l| l.starts_with("ungated_floor,")));
    let total = body.iter().find(|l| l.starts_with("total,")).expect("total row");
    let max_total: f64 = total.split(',').nth(7).unwrap().parse().unwrap();
    let expected_total: f64 = total.split(',').nth(8).unwrap().parse().unwrap();
    // Gates init around p = 0.8, so expected cost is below the maximum
    // but well above the ungated floor.
    assert!(expected_total < max_total);
    assert!(expected_total > 0.2 * max_total);
}

#[test]
fn ablation_grid_writes_comparison_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("mini.json");
    let grid_dir = dir.path().join("grid");
    std::fs::write(&cfg_path, mini_config(&dir.path().join("unused"))).unwrap();

    let out = run(&[
        "ablation",
        "--config", cfg_path.to_str().unwrap(),
        "--out", grid_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "ablation failed: {}", stderr(&out));

    let csv = std::fs::read_to_string(grid_dir.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "granularity,loss_kind,accuracy,flops_ratio,mean_activation,fraction_polarized"
    );
    assert_eq!(lines.len(), 5, "header plus one row per grid cell:\n{csv}");
    for cell in ["layer,batch", "layer,aig", "channel,batch", "channel,aig"] {
        assert!(lines.iter().any(|l| l.starts_with(cell)), "missing row {cell}:\n{csv}");
    }
    for cell_dir in ["layer_batch", "layer_aig", "channel_batch", "channel_aig"] {
        assert!(grid_dir.join(cell_dir).join("final.ckpt").exists());
    }
}
