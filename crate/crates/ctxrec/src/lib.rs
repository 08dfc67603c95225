//! Implicit-context recommendation: unsupervised multi-head representation
//! pre-training feeding a wide-and-deep ranker.
//!
//! Users interact with items under latent conditions no log column records:
//! the same person ordering lunch at a desk and dinner for a family behaves
//! like two different users. This crate treats those conditions as *implicit
//! contexts* and learns them in two stages:
//!
//! 1. **Pre-training** ([`pretrain`]): a multi-head denoising autoencoder, a
//!    multi-head variational autoencoder, or the attention-constrained
//!    denoising autoencoder (`Macdae`) reconstructs user/item/context input
//!    vectors; each head specializes toward one latent context, with an
//!    attention mixture and a pairwise-cosine constraint keeping the heads
//!    both weighted and distinct.
//! 2. **Ranking** ([`ranker`]): a wide-and-deep scorer consumes the raw
//!    features plus the pre-trained representation, either frozen
//!    (`feature_based`) or trained end-to-end (`fine_tune`).
//!
//! Everything is driven by a JSON experiment config with mandatory seeds, so
//! a run is reproducible byte-for-byte.
//!
//! ## Where to start
//!
//! The `examples/` directory is the front door; each file is a runnable
//! walk-through of one capability:
//!
//! - `pretrain_models` trains all three model kinds on one dataset and
//!   compares reconstruction losses.
//! - `head_constraints` sweeps the constraint weight and shows mean
//!   pairwise head cosine dropping as the penalty tightens.
//! - `gradient_check` verifies every analytic gradient against central
//!   differences.
//! - `rank_with_pretraining` runs base vs. pretrained rankers and prints the
//!   metric lift.
//! - `ranking_metrics` exercises NDCG@k and AUC on hand-checkable lists.
//! - `k_sweep` varies the head count and reports NDCG per K.
//! - `feature_ablation` drops one feature column and measures the AUC delta.
//! - `full_pipeline` is the config-driven end-to-end run, chaining every
//!   CLI stage in-process.
//!
//! ```
//! use ctxrec::pretrain::{self, ModelKind, PretrainConfig};
//!
//! let x = vec![vec![0.9, 0.1, 0.0, 0.3]; 64];
//! let config = PretrainConfig {
//!     hidden_dim: 8,
//!     heads: 2,
//!     epochs: 3,
//!     ..PretrainConfig::default_for(ModelKind::Macdae, 4)
//! };
//! let (model, trace) = pretrain::fit(&config, &x).unwrap();
//! let rep = model.extract(&x[0]).unwrap();
//! assert_eq!(rep.values.len(), 8);
//! assert!(trace.last().unwrap().total <= trace.first().unwrap().total);
//! ```
//!
//! The same functionality is reachable from the thin `ctxrec` binary:
//! `ingest`, `pretrain`, `train`, `evaluate`, `analyze`, `ablate`.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod numerics;
pub mod pretrain;
pub mod ranker;
pub mod synth;

pub use error::{Error, Result};
