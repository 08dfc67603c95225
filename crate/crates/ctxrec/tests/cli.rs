//! Binary-level behavior: exit codes, diagnostics, flag precedence, and
//! artifact handling, exercised through the real executable.

use ctxrec::synth::{self, SynthConfig};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Workspace {
    _dir: tempfile::TempDir,
    tsv: PathBuf,
    out: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("reviews.tsv");
        let synth = SynthConfig {
            users: 15,
            items: 40,
            rows_per_user: 20,
            ..SynthConfig::default()
        };
        std::fs::write(&tsv, synth::review_tsv(&synth)).unwrap();
        let out = dir.path().join("artifacts");
        let config = dir.path().join("experiment.json");
        let ws = Workspace {
            _dir: dir,
            tsv,
            out,
            config,
        };
        ws.write_config(default_config(&ws.tsv, &ws.out));
        ws
    }

    fn write_config(&self, value: serde_json::Value) {
        std::fs::write(&self.config, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", self.config.to_str().unwrap()];
        all.extend_from_slice(args);
        run_raw(&all)
    }
}

fn run_raw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxrec"))
        .args(args)
        .env_remove("CTXREC_OUTPUT")
        .output()
        .expect("binary runs")
}

fn default_config(tsv: &Path, out: &Path) -> serde_json::Value {
    serde_json::json!({
        "dataset": {
            "path": tsv,
            "split": {"strategy": "ratio", "fraction": 0.8},
            "seed": 71
        },
        "features": {"embedding_dim": 4, "seed": 72},
        "pretrain": {
            "kind": "macdae",
            "heads": 2,
            "hidden_dim": 8,
            "epochs": 2,
            "batch_size": 32,
            "seed": 73
        },
        "ranker": {
            "integration": "fine_tune",
            "deep_layers": [8],
            "epochs": 2,
            "batch_size": 32,
            "negative_rate": 1,
            "seed": 74
        },
        "evaluation": {"negative_samples": 5, "k": [5], "seed": 75},
        "output": out
    })
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn config_errors_exit_2_with_one_line_diagnostics() {
    let ws = Workspace::new();

    let missing = run_raw(&["ingest"]);
    assert_eq!(missing.status.code(), Some(2), "--config is required");
    assert!(stderr_of(&missing).contains("--config"));

    let nofile = run_raw(&["--config", "/no/such/config.json", "ingest"]);
    assert_eq!(nofile.status.code(), Some(2));

    let bad_preset = ws.run(&["--preset", "imaginary", "ingest"]);
    assert_eq!(bad_preset.status.code(), Some(2));
    assert!(stderr_of(&bad_preset).contains("yelp-like"), "lists the presets");

    // every diagnostic is one line of the form "ctxrec: kind=... message"
    for output in [&missing, &nofile, &bad_preset] {
        let err = stderr_of(output);
        assert_eq!(err.lines().count(), 1, "diagnostic must be one line: {err}");
        assert!(err.starts_with("ctxrec: kind=config "), "{err}");
    }
}

#[test]
fn missing_seed_is_named_in_the_diagnostic() {
    let ws = Workspace::new();
    let mut config = default_config(&ws.tsv, &ws.out);
    config["pretrain"].as_object_mut().unwrap().remove("seed");
    ws.write_config(config);

    let output = ws.run(&["ingest"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("seed"), "{}", stderr_of(&output));
}

#[test]
fn validation_failures_exit_2() {
    let ws = Workspace::new();
    let mut config = default_config(&ws.tsv, &ws.out);
    config["evaluation"]["k"] = serde_json::json!([]);
    ws.write_config(config);
    let output = ws.run(&["ingest"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("evaluation.k"));

    let mut config = default_config(&ws.tsv, &ws.out);
    config["pretrain"]["hidden_dim"] = serde_json::json!(7);
    ws.write_config(config);
    let output = ws.run(&["pretrain"]);
    assert_eq!(output.status.code(), Some(2), "7 hidden units over 2 heads");
}

#[test]
fn data_errors_exit_3() {
    let ws = Workspace::new();

    // dataset file missing
    let mut config = default_config(&ws.tsv, &ws.out);
    config["dataset"]["path"] = serde_json::json!("/no/such/data.tsv");
    ws.write_config(config);
    let output = ws.run(&["ingest"]);
    assert_eq!(output.status.code(), Some(3));
    assert!(stderr_of(&output).starts_with("ctxrec: kind=data "));

    // stage artifacts missing
    ws.write_config(default_config(&ws.tsv, &ws.out));
    let output = ws.run(&["pretrain"]);
    assert_eq!(output.status.code(), Some(3), "pretrain before ingest");
    assert!(stderr_of(&output).contains("ingest"), "points at the missing stage");

    assert!(ws.run(&["ingest"]).status.success());
    let output = ws.run(&["evaluate"]);
    assert_eq!(output.status.code(), Some(3), "evaluate before train");
    assert!(stderr_of(&output).contains("train"));

    // malformed data file
    std::fs::write(&ws.tsv, "user_id\titem_id\trating\n1\t2\tnot_a_number\n").unwrap();
    let output = ws.run(&["ingest"]);
    assert_eq!(output.status.code(), Some(3));
    let err = stderr_of(&output);
    assert!(err.contains("line"), "names the offending line: {err}");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let ws = Workspace::new();
    assert!(ws.run(&["ingest"]).status.success());
    assert!(ws.run(&["pretrain"]).status.success());

    let ckpt = ws.out.join("pretrain.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&ckpt, &bytes).unwrap();

    let output = ws.run(&["train"]);
    assert_eq!(output.status.code(), Some(3));
    assert!(stderr_of(&output).contains("checksum"), "{}", stderr_of(&output));
}

#[test]
fn checkpoint_kind_mismatch_is_a_config_error() {
    let ws = Workspace::new();
    assert!(ws.run(&["ingest"]).status.success());
    assert!(ws.run(&["pretrain"]).status.success());

    let mut config = default_config(&ws.tsv, &ws.out);
    config["pretrain"]["kind"] = serde_json::json!("dae");
    ws.write_config(config);
    let output = ws.run(&["train"]);
    assert_eq!(output.status.code(), Some(2));
    let err = stderr_of(&output);
    assert!(err.contains("macdae") && err.contains("dae"), "{err}");
}

#[test]
fn output_precedence_flag_env_config() {
    let ws = Workspace::new();

    // config output
    assert!(ws.run(&["ingest"]).status.success());
    assert!(ws.out.join("manifest.json").exists());

    // env overrides config
    let env_dir = ws._dir.path().join("from-env");
    let output = Command::new(env!("CARGO_BIN_EXE_ctxrec"))
        .args(["--config", ws.config.to_str().unwrap(), "ingest"])
        .env("CTXREC_OUTPUT", &env_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(env_dir.join("manifest.json").exists());

    // flag overrides env
    let flag_dir = ws._dir.path().join("from-flag");
    let output = Command::new(env!("CARGO_BIN_EXE_ctxrec"))
        .args([
            "--config",
            ws.config.to_str().unwrap(),
            "--output",
            flag_dir.to_str().unwrap(),
            "ingest",
        ])
        .env("CTXREC_OUTPUT", &env_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(flag_dir.join("manifest.json").exists());
}

#[test]
fn seed_flag_changes_every_stage() {
    let ws = Workspace::new();
    for command in ["ingest", "pretrain"] {
        assert!(ws.run(&[command]).status.success());
    }
    let baseline = std::fs::read(ws.out.join("pretrain.ckpt")).unwrap();

    for command in ["ingest", "pretrain"] {
        assert!(ws.run(&["--seed", "9000", command]).status.success());
    }
    let reseeded = std::fs::read(ws.out.join("pretrain.ckpt")).unwrap();
    assert_ne!(baseline, reseeded, "--seed must flow into training");

    // and the override itself is reproducible
    for command in ["ingest", "pretrain"] {
        assert!(ws.run(&["--seed", "9000", command]).status.success());
    }
    let again = std::fs::read(ws.out.join("pretrain.ckpt")).unwrap();
    assert_eq!(reseeded, again);
}

#[test]
fn presets_complete_a_minimal_config() {
    let ws = Workspace::new();
    ws.write_config(serde_json::json!({
        "dataset": {"path": ws.tsv, "min_reviews": 0, "seed": 81},
        "features": {"embedding_dim": 4, "seed": 82},
        "pretrain": {"kind": "macdae", "hidden_dim": 8, "epochs": 2, "seed": 83},
        "ranker": {"integration": "fine_tune", "deep_layers": [8], "epochs": 2, "seed": 84},
        "evaluation": {"negative_samples": 5, "seed": 85},
        "output": ws.out
    }));
    let output = ws.run(&["--preset", "yelp-like", "ingest"]);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );

    // the preset's ratio split fills in; the user's min_reviews wins over
    // the preset's 20 (which would empty this small dataset)
    let manifest = std::fs::read_to_string(ws.out.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["manifest"]["min_reviews"], 0);
    assert_eq!(manifest["manifest"]["split"]["strategy"], "ratio");
}

#[test]
fn ablate_rejects_unknown_features() {
    let ws = Workspace::new();
    let output = ws.run(&["ablate", "--feature", "phase_of_moon"]);
    assert_eq!(output.status.code(), Some(2));
    let err = stderr_of(&output);
    assert!(err.contains("phase_of_moon") && err.contains("slot"), "{err}");
}

#[test]
fn full_chain_writes_expected_artifacts() {
    let ws = Workspace::new();
    for command in ["ingest", "pretrain", "train", "evaluate", "analyze"] {
        let output = ws.run(&[command]);
        assert!(
            output.status.success(),
            "{command}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    let output = ws.run(&["ablate", "--feature", "noise0"]);
    assert!(output.status.success());

    for artifact in [
        "manifest.json",
        "pretrain.ckpt",
        "pretrain_trace.csv",
        "ranker.ckpt",
        "train_trace.csv",
        "metrics.csv",
        "metrics.json",
        "analysis.json",
        "hidden_states.csv",
        "ablation.json",
    ] {
        assert!(ws.out.join(artifact).exists(), "missing {artifact}");
    }

    // metric csv schema: model,dataset,metric,k,value,seed
    let metrics = std::fs::read_to_string(ws.out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "model,dataset,metric,k,value,seed");
    let body: Vec<&str> = lines.collect();
    assert!(body.iter().any(|l| l.starts_with("wide_deep+macdae_finetune,reviews,ndcg,5,")));
    assert!(body.iter().any(|l| l.starts_with("wide_deep+macdae_finetune,reviews,auc,,")));
    assert!(body.iter().all(|l| l.ends_with(",75")), "eval seed recorded per row");

    // traces carry their stage seeds too
    let trace = std::fs::read_to_string(ws.out.join("pretrain_trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,reconstruction,kl,penalty,total,seed"));
    assert!(trace.lines().nth(1).unwrap().ends_with(",73"));
}
