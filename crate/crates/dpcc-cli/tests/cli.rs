//! End-to-end runs of the real binary: exit codes, error shape, and the
//! demo-gen -> train -> rollout/eval/ablate pipeline on a tiny config.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpcc"))
}

#[test]
fn usage_errors_exit_two() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_give_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["demo-gen", "--config", "/nope/exp.toml", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("/nope/exp.toml"), "{err}");

    // Training without a corpus names the missing file.
    let out = bin().args(["train", "--seed", "0", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("demos.jsonl"), "{err}");
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    // Demo generation needs the full episode cap (the expert takes ~100
    // steps); evaluation runs with a short cap to stay quick.
    let full = dir.path().join("exp.toml");
    let short = dir.path().join("exp-eval.toml");
    let base = r#"
train_seeds = [0]
test_seeds = [0]
methods = ["model-free"]
batch = 2
margin = 0.03
mismatch_factors = [1.0]

[train]
rows = 8
k_steps = 3
train_steps = 60
batch = 4
learning_rate = 1e-3
hidden = [16, 16]
embed_dim = 8
val_every = 30
"#;
    std::fs::write(&full, base).unwrap();
    std::fs::write(&short, format!("{base}\n[env]\nepisode_cap = 40\n")).unwrap();

    let outdir = dir.path().join("lab");
    let od = outdir.to_str().unwrap();
    let full_s = full.to_str().unwrap();
    let short_s = short.to_str().unwrap();
    let run = |args: &[&str]| {
        let out = bin().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "args {args:?}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    let s = run(&["demo-gen", "--config", full_s, "--out", od]);
    assert!(s.contains("96 demonstrations"), "{s}");
    let s = run(&["train", "--config", full_s, "--seed", "0", "--out", od]);
    assert!(s.contains("saved"), "{s}");

    // A rollout reports one parseable JSON summary line.
    let s = run(&["rollout", "--config", short_s, "--method", "model-free", "--seed", "3", "--out", od]);
    let v: serde_json::Value = serde_json::from_str(s.trim()).unwrap();
    assert_eq!(v["method"], "model-free");
    assert!(v["timesteps"].as_u64().unwrap() <= 40);

    run(&["eval", "--config", short_s, "--out", od]);
    let csv = std::fs::read_to_string(outdir.join("metrics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("method,tightening,mismatch,"), "{csv}");
    assert!(csv.contains("model-free,on,"), "{csv}");
    assert!(outdir.join("episodes.jsonl").exists());
    assert!(outdir.join("plot.json").exists());

    run(&["eval", "--config", short_s, "--no-tightening", "--out", od]);
    let csv = std::fs::read_to_string(outdir.join("metrics.csv")).unwrap();
    assert!(csv.contains("model-free,off,"), "{csv}");

    run(&["ablate", "--config", short_s, "--out", od]);
    let csv = std::fs::read_to_string(outdir.join("ablation.csv")).unwrap();
    assert!(csv.contains("dpcc-c,on,1.00"), "{csv}");
}
