use std::path::Path;
use std::process::{Command, Output};

fn uapforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uapforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("UAPFORGE_PESQ")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// A config small enough for a full pipeline in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "out_dir": dir.join("run"),
        "seed": 5,
        "corpus": {"source": {"synthetic": {
            "num_speakers": 3, "utterances_per_speaker": 5, "min_duration": 0.05, "max_duration": 0.08
        }}},
        "victim": {
            "model": {
                "num_speakers": 3, "frame_len": 400, "eval_hop": 200, "num_filters": 4, "kernel_len": 21,
                "pool": 2, "conv_channels": 4, "conv_kernel": 3, "conv_blocks": 1, "hidden": 8
            },
            "train": {"max_epochs": 3, "batch_size": 8}
        },
        "attack": {
            "steps": 4, "batch_size": 4, "log_every": 2, "lambda": 1.0,
            "generator": {"uap_len": 256, "channels": [4, 4, 3, 3, 2, 2, 2, 2]}
        },
        "evaluation": {"sigma_grid": [0.001, 0.1], "lambda_grid": [1.0, 10.0]}
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&uapforge(&[])), 1);
    assert_eq!(code(&uapforge(&["frobnicate"])), 1);
    assert_eq!(code(&uapforge(&["synth-corpus", "--out", "x", "--bogus"])), 1);
    let typo = uapforge(&["synth-corpus", "--out", "x", "--attack.lamda", "3"]);
    assert_eq!(code(&typo), 1);
    assert!(String::from_utf8_lossy(&typo.stderr).contains("lamda"));
    // out_dir has no default
    assert_eq!(code(&uapforge(&["synth-corpus"])), 1);
    assert_eq!(code(&uapforge(&["--help"])), 0);
}

#[test]
fn missing_prerequisite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = uapforge(&["train-victim", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth-corpus"));
    assert!(out.join("resolved_config.json").exists());
}

fn pipeline(dir: &Path) -> std::path::PathBuf {
    let cfg = tiny_config(dir);
    let c = cfg.to_str().unwrap();
    for step in [
        vec!["synth-corpus"],
        vec!["train-victim"],
        vec!["evaluate", "--uap", "zero", "--name", "clean"],
        vec!["train-uap"],
        vec!["evaluate"],
        vec!["baseline"],
        vec!["interp", "--grid", "0,0.5,1"],
        vec!["sweep", "--var", "lambda"],
    ] {
        let mut args = step.clone();
        args.extend(["--config", c]);
        let o = uapforge(&args);
        assert_eq!(code(&o), 0, "{step:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    dir.join("run")
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    for f in [
        "corpus/index.json",
        "corpus/spk001/utt002.wav",
        "victim.uapf",
        "victim_log.csv",
        "clean.json",
        "generator.uapf",
        "train_log.csv",
        "train_log.json",
        "report.json",
        "report.csv",
        "baseline.csv",
        "sweep_beta.csv",
        "sweep_lambda.csv",
        "sweep_lambda.json",
        "lambda_selection.json",
        "sweep_lambda/generator_lambda_10_r0.uapf",
    ] {
        let (x, y) = (std::fs::read(ra.join(f)).unwrap(), std::fs::read(rb.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let clean: serde_json::Value = serde_json::from_slice(&std::fs::read(ra.join("clean.json")).unwrap()).unwrap();
    assert_eq!(clean["pesq_status"], "unavailable");
    assert_eq!(clean["generator_hash"], serde_json::Value::Null);
    assert_eq!(
        std::fs::read_to_string(ra.join("sweep_beta.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn flag_overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = uapforge(&[
        "synth-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "targeted",
        "--target",
        "2",
        "--lambda",
        "2000",
        "--attack.batch_size",
        "6",
        "--set",
        "evaluation.repetitions=2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["attack"]["mode"], "targeted");
    assert_eq!(resolved["attack"]["target"], 2);
    assert_eq!(resolved["attack"]["threshold"], serde_json::Value::Null);
    assert_eq!(resolved["attack"]["lambda"], 2000.0);
    assert_eq!(resolved["attack"]["batch_size"], 6);
    assert_eq!(resolved["evaluation"]["repetitions"], 2);
}

#[test]
fn apply_writes_the_perturbed_wav() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&uapforge(&["synth-corpus", "--config", c])), 0);
    let input = dir.path().join("run/corpus/spk000/utt000.wav");
    let output = dir.path().join("adv.wav");
    let o = uapforge(&[
        "apply",
        "--config",
        c,
        "--uap",
        "zero",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&output).unwrap());
}
