//! Sweep the head-similarity penalty weight and watch the heads decorrelate.
//!
//! With sigmoid activations every head lives in the positive orthant, so
//! unconstrained heads end up nearly parallel: mean pairwise cosine close
//! to 1. The `macdae` penalty charges `cost * cos(h_i, h_j)` per head pair
//! (in the default `raw` mode), so raising the cost trades a little
//! reconstruction for heads that attend to different parts of the input.
//!
//! Run with `cargo run --release --example head_constraints`.

use ctxrec::eval;
use ctxrec::pretrain::{self, ModelKind, PretrainConfig};
use ctxrec::synth::{self, SynthConfig};
use ctxrec::data;

fn main() -> ctxrec::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let tsv = dir.path().join("reviews.tsv");
    let synth_config = SynthConfig {
        users: 40,
        rows_per_user: 120,
        seed: 5,
        ..SynthConfig::default()
    };
    std::fs::write(&tsv, synth::review_tsv(&synth_config))?;

    let split = data::SplitStrategy::Ratio { fraction: 0.8 };
    let (dataset, _) = data::prepare(&tsv, 4.0, 0, &split, 21, &Default::default())?;
    let (user_emb, item_emb) = data::init_embeddings(&dataset.encoder, 8, 22)?;
    let mut inputs = data::build_pretrain_set(&dataset, &user_emb, &item_emb)?;
    inputs.truncate(1000);

    println!("K=8 heads, {} training vectors\n", inputs.len());
    println!("{:>8}  {:>12}  {:>14}", "cost", "mean cosine", "reconstruction");

    for cost in [0.0, 0.01, 0.05, 0.1, 0.5] {
        let config = PretrainConfig {
            heads: 8,
            hidden_dim: 32,
            epochs: 20,
            penalty_cost: cost,
            similarity_threshold: 0.75,
            seed: 99,
            ..PretrainConfig::default_for(ModelKind::Macdae, dataset.input_dim(8))
        };
        let (model, trace) = pretrain::fit(&config, &inputs)?;
        let stats = eval::head_cosine_stats(&model, &inputs[..200.min(inputs.len())])?;
        println!(
            "{cost:>8}  {:>12.4}  {:>14.4}",
            stats.mean_cosine,
            trace.last().unwrap().reconstruction
        );
    }

    println!("\nhigher cost, lower cosine: the heads are forced apart");
    Ok(())
}
