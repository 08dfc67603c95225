//! The config-driven pipeline end to end, exactly as the `ctxrec` binary
//! runs it: ingest, pretrain, train, evaluate, analyze, ablate, each stage
//! reading the previous stage's artifacts from the output directory.
//!
//! Everything is determined by one JSON config with per-stage seeds, so
//! re-running any stage rewrites its artifacts byte for byte. The same
//! flow from a shell:
//!
//! ```text
//! ctxrec --config experiment.json ingest
//! ctxrec --config experiment.json pretrain
//! ctxrec --config experiment.json train
//! ctxrec --config experiment.json evaluate
//! ctxrec --config experiment.json analyze
//! ctxrec --config experiment.json ablate --feature slot
//! ```
//!
//! Run with `cargo run --release --example full_pipeline`.

use ctxrec::cli;
use ctxrec::synth::{self, SynthConfig};

fn main() -> ctxrec::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let tsv = dir.path().join("reviews.tsv");
    std::fs::write(&tsv, synth::review_tsv(&SynthConfig::default()))?;

    let out = dir.path().join("artifacts");
    let config_path = dir.path().join("experiment.json");
    let config_json = serde_json::json!({
        "dataset": {
            "path": tsv,
            "positive_threshold": 4.0,
            "split": {"strategy": "ratio", "fraction": 0.8},
            "seed": 41
        },
        "features": {"embedding_dim": 8, "seed": 42},
        "pretrain": {
            "kind": "macdae",
            "heads": 4,
            "hidden_dim": 32,
            "keep_probability": 0.9,
            "epochs": 15,
            "batch_size": 32,
            "seed": 43
        },
        "ranker": {
            "integration": "fine_tune",
            "deep_layers": [16],
            "epochs": 15,
            "batch_size": 32,
            "learning_rate": 0.003,
            "seed": 44
        },
        "evaluation": {"negative_samples": 20, "k": [5, 10], "seed": 45},
        "output": out
    });
    std::fs::write(&config_path, serde_json::to_string_pretty(&config_json).unwrap())?;

    let config = cli::load_config(&config_path, None, None)?;
    std::fs::create_dir_all(&out)?;

    cli::cmd_ingest(&config, &out)?;
    cli::cmd_pretrain(&config, &out)?;
    cli::cmd_train(&config, &out)?;
    cli::cmd_evaluate(&config, &out)?;
    cli::cmd_analyze(&config, &out)?;
    cli::cmd_ablate(&config, &out, "slot")?;

    println!("\nartifacts in {}:", out.display());
    let mut names: Vec<String> = std::fs::read_dir(&out)?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        let len = std::fs::metadata(out.join(&name))?.len();
        println!("  {name:<20} {len:>8} bytes");
    }
    Ok(())
}
