//! Vary the number of heads and report ranking quality per K.
//!
//! K=1 is an ordinary single-head autoencoder; more heads give the model
//! room to dedicate capacity to different latent regimes. The synthetic
//! data has four of them, so capacity helps up to a point and the total
//! hidden width is held fixed to keep the comparison fair.
//!
//! Run with `cargo run --release --example k_sweep`.

use ctxrec::data::{self, SplitStrategy};
use ctxrec::eval::evaluate_ranking;
use ctxrec::pretrain::{self, ModelKind, PretrainConfig};
use ctxrec::ranker::{self, IntegrationMode, RankerConfig};
use ctxrec::synth::{review_tsv, SynthConfig};
use std::collections::BTreeSet;

fn main() -> ctxrec::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("reviews.tsv");
    std::fs::write(&path, review_tsv(&SynthConfig { seed: 33, ..SynthConfig::default() }))?;
    let (dataset, _) = data::prepare(
        &path,
        4.0,
        0,
        &SplitStrategy::Ratio { fraction: 0.8 },
        33,
        &BTreeSet::new(),
    )?;
    let (user_emb, item_emb) = data::init_embeddings(&dataset.encoder, 8, 33)?;
    let input_dim = dataset.input_dim(8);
    let xs = data::build_pretrain_set(&dataset, &user_emb, &item_emb)?;
    let examples = data::build_train_examples(&dataset, &user_emb, &item_emb, 2, 36)?;

    println!("{:>4}  {:>8}  {:>8}  {:>8}", "K", "ndcg@5", "ndcg@10", "auc");
    for heads in [1usize, 2, 4, 8] {
        let config = PretrainConfig {
            kind: ModelKind::Macdae,
            input_dim,
            hidden_dim: 32,
            heads,
            keep_probability: 0.9,
            epochs: 25,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 34,
            ..PretrainConfig::default_for(ModelKind::Macdae, input_dim)
        };
        let (pre, _) = pretrain::fit(&config, &xs)?;
        let rconfig = RankerConfig {
            integration: IntegrationMode::FineTune,
            deep_layers: vec![16],
            epochs: 25,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 35,
        };
        let (model, _) = ranker::fit(&rconfig, &examples, Some(&pre))?;
        let report = evaluate_ranking(
            &dataset,
            &user_emb,
            &item_emb,
            |x| model.score(x),
            20,
            &[5, 10],
            37,
        )?;
        println!(
            "{heads:>4}  {:>8.4}  {:>8.4}  {:>8.4}",
            report.ndcg[&5], report.ndcg[&10], report.auc
        );
    }
    Ok(())
}
