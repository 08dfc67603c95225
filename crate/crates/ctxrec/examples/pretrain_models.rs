//! Train all three representation models on the same synthetic review data
//! and compare their loss traces.
//!
//! The data generator hides a per-interaction "regime" (think lunch rush
//! vs. family dinner) that shows up only as correlated noise across the
//! context columns. Each model reconstructs the assembled input vectors;
//! what differs is how the heads are combined:
//!
//! - `dae`: heads are concatenated as-is, no weighting.
//! - `vae`: heads parameterize a Gaussian code, trained with a KL term.
//! - `macdae`: an attention query over the clean input weights the heads,
//!   and a cosine penalty pushes the heads apart.
//!
//! Run with `cargo run --example pretrain_models`.

use ctxrec::data;
use ctxrec::pretrain::{self, ModelKind, PretrainConfig};
use ctxrec::synth::{self, SynthConfig};

fn main() -> ctxrec::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let tsv = dir.path().join("reviews.tsv");
    std::fs::write(&tsv, synth::review_tsv(&SynthConfig::default()))?;

    let split = data::SplitStrategy::Ratio { fraction: 0.8 };
    let (dataset, _) = data::prepare(&tsv, 4.0, 0, &split, 11, &Default::default())?;
    let (user_emb, item_emb) = data::init_embeddings(&dataset.encoder, 8, 12)?;
    let inputs = data::build_pretrain_set(&dataset, &user_emb, &item_emb)?;
    let input_dim = dataset.input_dim(8);
    println!(
        "pre-training on {} positive interactions, input width {input_dim}\n",
        inputs.len()
    );

    for kind in [ModelKind::Dae, ModelKind::Vae, ModelKind::Macdae] {
        let config = PretrainConfig {
            heads: 4,
            hidden_dim: 32,
            epochs: 10,
            seed: 13,
            ..PretrainConfig::default_for(kind, input_dim)
        };
        let (model, trace) = pretrain::fit(&config, &inputs)?;
        let first = &trace[0];
        let last = trace.last().unwrap();
        println!("{kind}:");
        println!(
            "  reconstruction {:.4} -> {:.4} over {} epochs",
            first.reconstruction, last.reconstruction, trace.len()
        );
        if last.kl != 0.0 {
            println!("  kl             {:.4} -> {:.4}", first.kl, last.kl);
        }
        if last.penalty != 0.0 {
            println!("  penalty        {:.4} -> {:.4}", first.penalty, last.penalty);
        }

        let rep = model.extract(&inputs[0])?;
        match rep.head_weights {
            Some(w) => {
                let weights: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
                println!("  attention over heads for one input: [{}]", weights.join(", "));
            }
            None => println!("  extraction is a plain {}-dim code", rep.values.len()),
        }
        println!();
    }
    Ok(())
}
