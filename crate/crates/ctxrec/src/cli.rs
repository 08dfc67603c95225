//! Config-driven pipeline orchestration behind the `ctxrec` binary.
//!
//! Six commands cover the experiment lifecycle: `ingest` prepares a dataset
//! and writes its manifest, `pretrain` fits the representation model,
//! `train` fits the ranker, `evaluate` scores the test split, `analyze`
//! reports head-similarity and hidden-state statistics, and `ablate` runs
//! the leave-one-feature-out comparison. Every command reads one JSON
//! config; `--preset` layers the config over a shipped baseline, `--seed`
//! overrides every stage seed at once, and `--output` (or `CTXREC_OUTPUT`)
//! overrides the artifact directory. Commands communicate only through
//! artifacts in the output directory, so stages can run in separate
//! processes, and re-running a command with the same config and inputs
//! rewrites artifacts byte-for-byte.
//!
//! Checkpoints are single self-describing binary files: a header (magic,
//! version, model kind, config snapshot JSON), named tensors with shapes as
//! little-endian 64-bit floats, and a SHA-256 checksum over everything
//! before it. Floats never round-trip through text, which is what makes the
//! bit-exact reproducibility guarantee possible.

use crate::data::{self, Dataset, DatasetManifest, SplitStrategy};
use crate::error::{Error, Result};
use crate::eval::{self, AnalysisReport, EvalReport};
use crate::features::EmbeddingTable;
use crate::pretrain::{self, EpochLoss, ModelKind, PenaltyMode, PretrainConfig, PretrainModel};
use crate::ranker::{self, IntegrationMode, RankerConfig, RankerModel};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Environment variable consulted for the output directory when `--output`
/// is absent.
pub const OUTPUT_ENV: &str = "CTXREC_OUTPUT";

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTXRECK1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "ctxrec",
    version,
    about = "Context-aware recommendation experiments: multi-head pre-trained representations feeding a wide-and-deep ranker"
)]
pub struct CliArgs {
    /// Experiment config (JSON)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Artifact directory; overrides CTXREC_OUTPUT and the config's `output`
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,

    /// Override every stage seed in the config with one value
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Layer the config over a shipped preset: yelp-like, dianping-like, ctr-like
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse, convert, split, and encode the dataset; writes manifest.json
    Ingest,
    /// Fit the representation model on train-split positives; writes pretrain.ckpt
    Pretrain,
    /// Fit the wide-and-deep ranker; writes ranker.ckpt
    Train,
    /// Rank the test split and report NDCG@k / AUC; writes metrics.csv + metrics.json
    Evaluate,
    /// Head-similarity and hidden-state statistics; writes analysis.json + hidden_states.csv
    Analyze,
    /// Leave-one-feature-out retraining comparison; writes ablation.json
    Ablate {
        /// Context feature (schema column without its c./d. prefix) to leave out
        #[arg(long)]
        feature: String,
    },
}

fn default_threshold() -> f64 {
    4.0
}

/// Dataset section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_threshold")]
    pub positive_threshold: f64,
    #[serde(default)]
    pub min_reviews: usize,
    pub split: SplitStrategy,
    #[serde(default)]
    pub exclude: BTreeSet<String>,
    pub seed: u64,
}

fn default_embedding_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    pub seed: u64,
}

fn default_heads() -> usize {
    4
}
fn default_hidden_dim() -> usize {
    64
}
fn default_keep_probability() -> f64 {
    0.95
}
fn default_penalty_cost() -> f64 {
    0.05
}
fn default_similarity_threshold() -> f64 {
    0.75
}
fn default_penalty_mode() -> PenaltyMode {
    PenaltyMode::Raw
}
fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    0.001
}

/// Pre-training section; `input_dim` is never configured, it comes from the
/// ingested dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub kind: ModelKind,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_keep_probability")]
    pub keep_probability: f64,
    #[serde(default = "default_penalty_cost")]
    pub penalty_cost: f64,
    #[serde(default = "default_similarity_threshold")]
    pub similarity_threshold: f64,
    #[serde(default = "default_penalty_mode")]
    pub penalty_mode: PenaltyMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub seed: u64,
}

impl PretrainSection {
    /// Bind the section to a concrete input width.
    pub fn to_config(&self, input_dim: usize) -> PretrainConfig {
        PretrainConfig {
            kind: self.kind,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            input_dim,
            keep_probability: self.keep_probability,
            penalty_cost: self.penalty_cost,
            similarity_threshold: self.similarity_threshold,
            penalty_mode: self.penalty_mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

fn default_deep_layers() -> Vec<usize> {
    vec![64]
}
fn default_ranker_epochs() -> usize {
    10
}
fn default_negative_rate() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerSection {
    pub integration: IntegrationMode,
    #[serde(default = "default_deep_layers")]
    pub deep_layers: Vec<usize>,
    #[serde(default = "default_ranker_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Sampled negatives added per positive train row.
    #[serde(default = "default_negative_rate")]
    pub negative_rate: usize,
    pub seed: u64,
}

impl RankerSection {
    pub fn to_config(&self) -> RankerConfig {
        RankerConfig {
            deep_layers: self.deep_layers.clone(),
            integration: self.integration,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

fn default_negative_samples() -> usize {
    50
}
fn default_k() -> Vec<usize> {
    vec![5, 10]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_negative_samples")]
    pub negative_samples: usize,
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
    pub seed: u64,
}

/// The full declarative experiment: one of these drives every command.
/// Seeds are mandatory in every stochastic section so a config is always a
/// complete recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub features: FeatureSection,
    pub pretrain: PretrainSection,
    pub ranker: RankerSection,
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Replace every stage seed with one value (the `--seed` override).
    pub fn set_all_seeds(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.features.seed = seed;
        self.pretrain.seed = seed;
        self.ranker.seed = seed;
        self.evaluation.seed = seed;
    }

    /// Static validation: everything checkable without touching the
    /// filesystem or knowing the input width.
    pub fn validate(&self) -> Result<()> {
        if self.features.embedding_dim == 0 {
            return Err(Error::Config("features.embedding_dim must be >= 1".into()));
        }
        // input_dim is dataset-derived; validate the rest with a stand-in
        self.pretrain.to_config(1).validate()?;
        self.ranker.to_config().validate()?;
        if self.ranker.integration != IntegrationMode::None && self.pretrain.hidden_dim == 0 {
            return Err(Error::Config("pretrain.hidden_dim must be >= 1".into()));
        }
        if self.evaluation.k.is_empty() {
            return Err(Error::Config("evaluation.k must list at least one cutoff".into()));
        }
        if self.evaluation.k.contains(&0) {
            return Err(Error::Config("evaluation.k cutoffs must be >= 1".into()));
        }
        if self.evaluation.negative_samples == 0 {
            return Err(Error::Config("evaluation.negative_samples must be >= 1".into()));
        }
        Ok(())
    }
}

fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "yelp-like" => Ok(include_str!("presets/yelp-like.json")),
        "dianping-like" => Ok(include_str!("presets/dianping-like.json")),
        "ctr-like" => Ok(include_str!("presets/ctr-like.json")),
        other => Err(Error::Config(format!(
            "unknown preset {other}; available: yelp-like, dianping-like, ctr-like"
        ))),
    }
}

fn merge_json(base: serde_json::Value, over: serde_json::Value) -> serde_json::Value {
    match (base, over) {
        (serde_json::Value::Object(mut b), serde_json::Value::Object(o)) => {
            for (key, value) in o {
                let merged = match b.remove(&key) {
                    Some(existing) => merge_json(existing, value),
                    None => value,
                };
                b.insert(key, merged);
            }
            serde_json::Value::Object(b)
        }
        (_, over) => over,
    }
}

/// Read, merge, override, and validate an experiment config. The user's
/// file wins over the preset field-by-field; `seed` then replaces every
/// stage seed when given.
pub fn load_config(
    path: &Path,
    preset: Option<&str>,
    seed_override: Option<u64>,
) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let user: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    let merged = match preset {
        Some(name) => {
            let base: serde_json::Value = serde_json::from_str(preset_text(name)?)
                .expect("shipped presets are valid JSON");
            merge_json(base, user)
        }
        None => user,
    };
    let mut config: ExperimentConfig = serde_json::from_value(merged)
        .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
    if let Some(seed) = seed_override {
        config.set_all_seeds(seed);
    }
    config.validate()?;
    Ok(config)
}

/// A parsed checkpoint: model kind, the config snapshot it was trained
/// under, and named parameter tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn push_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&u32::try_from(bytes.len()).expect("length fits u32").to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Serialize and write a checkpoint, checksummed with SHA-256.
pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_bytes(&mut buf, checkpoint.kind.as_bytes());
    push_bytes(&mut buf, checkpoint.config_json.as_bytes());
    buf.extend_from_slice(&u32::try_from(checkpoint.tensors.len()).unwrap().to_le_bytes());
    for (name, dims, values) in &checkpoint.tensors {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Dimension(format!(
                "tensor {name}: shape {dims:?} does not hold {} values",
                values.len()
            )));
        }
        push_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&u32::try_from(dims.len()).unwrap().to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Data("checkpoint truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint holds invalid UTF-8".into()))
    }
}

/// Read and verify a checkpoint: magic, version, and checksum must all
/// match.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(Error::Data(format!("{} is too short to be a checkpoint", path.display())));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored_digest {
        return Err(Error::Data(format!(
            "{} fails its checksum; the file is corrupt",
            path.display()
        )));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{} is not a ctxrec checkpoint", path.display())));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let kind = cur.string()?;
    let config_json = cur.string()?;
    let n_tensors = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()? as usize);
        }
        let count = dims.iter().product::<usize>();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        tensors.push((name, dims, values));
    }
    if cur.pos != body.len() {
        return Err(Error::Data("checkpoint has trailing bytes".into()));
    }
    Ok(Checkpoint {
        kind,
        config_json,
        tensors,
    })
}

fn tensor_map(
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> {
    tensors
        .iter()
        .map(|(n, d, v)| (n.clone(), (d.clone(), v.clone())))
        .collect()
}

/// Written as `manifest.json`: the config that produced the dataset plus
/// everything needed to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestArtifact {
    pub config: ExperimentConfig,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainSnapshot {
    experiment: ExperimentConfig,
    pretrain: PretrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankerSnapshot {
    experiment: ExperimentConfig,
    ranker: RankerConfig,
    input_dim: usize,
    pretrain: Option<PretrainConfig>,
}

#[derive(Serialize)]
struct MetricsArtifact<'a> {
    config: &'a ExperimentConfig,
    model: &'a str,
    dataset: &'a str,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct AnalysisArtifact<'a> {
    config: &'a ExperimentConfig,
    inputs: usize,
    report: &'a AnalysisReport,
}

#[derive(Serialize)]
struct AblationArtifact<'a> {
    config: &'a ExperimentConfig,
    report: &'a eval::AblationReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("artifact serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `{what}` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{} is not a valid artifact: {e}", path.display())))
}

/// Resolve the artifact directory: `--output` flag, then `CTXREC_OUTPUT`,
/// then the config's `output`.
pub fn resolve_output(flag: Option<&Path>, config: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir.to_path_buf());
    }
    if let Ok(dir) = std::env::var(OUTPUT_ENV) {
        if !dir.is_empty() {
            return Ok(PathBuf::from(dir));
        }
    }
    config.output.clone().ok_or_else(|| {
        Error::Config(format!(
            "no output directory: pass --output, set {OUTPUT_ENV}, or add \"output\" to the config"
        ))
    })
}

fn load_dataset_stage(config: &ExperimentConfig, out: &Path) -> Result<(Dataset, IngestArtifact)> {
    let artifact: IngestArtifact = read_json(&out.join("manifest.json"), "ingest")?;
    let dataset = data::load_prepared(&config.dataset.path, &artifact.manifest)?;
    Ok((dataset, artifact))
}

fn embeddings_for(
    config: &ExperimentConfig,
    dataset: &Dataset,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    data::init_embeddings(&dataset.encoder, config.features.embedding_dim, config.features.seed)
}

fn dataset_id(config: &ExperimentConfig) -> String {
    config
        .dataset
        .path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn model_id(config: &ExperimentConfig) -> String {
    match config.ranker.integration {
        IntegrationMode::None => "wide_deep".into(),
        IntegrationMode::FeatureBased => format!("wide_deep+{}_frozen", config.pretrain.kind),
        IntegrationMode::FineTune => format!("wide_deep+{}_finetune", config.pretrain.kind),
    }
}

/// Run `ingest` against an already-loaded config; returns the artifact.
pub fn cmd_ingest(config: &ExperimentConfig, out: &Path) -> Result<IngestArtifact> {
    let (dataset, manifest) = data::prepare(
        &config.dataset.path,
        config.dataset.positive_threshold,
        config.dataset.min_reviews,
        &config.dataset.split,
        config.dataset.seed,
        &config.dataset.exclude,
    )?;
    let artifact = IngestArtifact {
        config: config.clone(),
        manifest,
    };
    write_json(&out.join("manifest.json"), &artifact)?;
    println!(
        "ingest: {} train / {} test rows, {} users, {} items, side width {}",
        dataset.train.len(),
        dataset.test.len(),
        dataset.encoder.user_vocab(),
        dataset.encoder.item_vocab(),
        dataset.encoder.side_dim()
    );
    Ok(artifact)
}

fn write_pretrain_trace(path: &Path, trace: &[EpochLoss], seed: u64) -> Result<()> {
    let mut csv = String::from("epoch,reconstruction,kl,penalty,total,seed\n");
    for e in trace {
        csv.push_str(&format!(
            "{},{},{},{},{},{seed}\n",
            e.epoch, e.reconstruction, e.kl, e.penalty, e.total
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// Run `pretrain`: fit the configured representation model on the train
/// split's positives and checkpoint it.
pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path) -> Result<PretrainModel> {
    let (dataset, _) = load_dataset_stage(config, out)?;
    let (user_emb, item_emb) = embeddings_for(config, &dataset)?;
    let inputs = data::build_pretrain_set(&dataset, &user_emb, &item_emb)?;
    if inputs.is_empty() {
        return Err(Error::Data(
            "train split has no positive rows to pre-train on".into(),
        ));
    }
    let pconfig = config
        .pretrain
        .to_config(dataset.input_dim(config.features.embedding_dim));
    let (model, trace) = pretrain::fit(&pconfig, &inputs)?;
    let snapshot = PretrainSnapshot {
        experiment: config.clone(),
        pretrain: pconfig.clone(),
    };
    write_checkpoint(
        &out.join("pretrain.ckpt"),
        &Checkpoint {
            kind: pconfig.kind.to_string(),
            config_json: serde_json::to_string(&snapshot)
                .map_err(|e| Error::Data(format!("snapshot serialization failed: {e}")))?,
            tensors: model.tensors(),
        },
    )?;
    write_pretrain_trace(&out.join("pretrain_trace.csv"), &trace, pconfig.seed)?;
    let last = trace.last().expect("fit always runs at least one epoch");
    println!(
        "pretrain: {} on {} examples, {} epochs, final loss {:.6}",
        pconfig.kind,
        inputs.len(),
        trace.len(),
        last.total
    );
    Ok(model)
}

fn load_pretrain_checkpoint(config: &ExperimentConfig, out: &Path) -> Result<PretrainModel> {
    let path = out.join("pretrain.ckpt");
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `pretrain` first",
            path.display()
        )));
    }
    let checkpoint = read_checkpoint(&path)?;
    let snapshot: PretrainSnapshot = serde_json::from_str(&checkpoint.config_json)
        .map_err(|e| Error::Data(format!("pretrain checkpoint snapshot is invalid: {e}")))?;
    if snapshot.pretrain.kind != config.pretrain.kind {
        return Err(Error::Config(format!(
            "pretrain checkpoint holds a {} model but the config wants {}; re-run pretrain",
            snapshot.pretrain.kind, config.pretrain.kind
        )));
    }
    PretrainModel::from_tensors(snapshot.pretrain, &tensor_map(&checkpoint.tensors))
}

/// Run `train`: build the supervised example set and fit the ranker,
/// attaching the pre-trained model unless integration is `none`.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<RankerModel> {
    let (dataset, _) = load_dataset_stage(config, out)?;
    let (user_emb, item_emb) = embeddings_for(config, &dataset)?;
    let examples = data::build_train_examples(
        &dataset,
        &user_emb,
        &item_emb,
        config.ranker.negative_rate,
        config.ranker.seed,
    )?;
    let input_dim = dataset.input_dim(config.features.embedding_dim);
    let pretrained = match config.ranker.integration {
        IntegrationMode::None => None,
        _ => {
            let model = load_pretrain_checkpoint(config, out)?;
            if model.config.input_dim != input_dim {
                return Err(Error::Config(format!(
                    "pretrain checkpoint expects input width {} but the dataset produces {}; re-run pretrain",
                    model.config.input_dim, input_dim
                )));
            }
            Some(model)
        }
    };
    let rconfig = config.ranker.to_config();
    let (model, losses) = ranker::fit(&rconfig, &examples, pretrained.as_ref())?;
    let snapshot = RankerSnapshot {
        experiment: config.clone(),
        ranker: rconfig,
        input_dim,
        pretrain: model.pretrain.as_ref().map(|p| p.config.clone()),
    };
    write_checkpoint(
        &out.join("ranker.ckpt"),
        &Checkpoint {
            kind: "wide_deep".into(),
            config_json: serde_json::to_string(&snapshot)
                .map_err(|e| Error::Data(format!("snapshot serialization failed: {e}")))?,
            tensors: model.tensors(),
        },
    )?;
    let mut csv = String::from("epoch,loss,seed\n");
    for (i, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{loss},{}\n", i + 1, config.ranker.seed));
    }
    std::fs::write(out.join("train_trace.csv"), csv)?;
    println!(
        "train: {} on {} examples, {} epochs, final loss {:.6}",
        model_id(config),
        examples.len(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

fn load_ranker_checkpoint(out: &Path) -> Result<(RankerModel, RankerSnapshot)> {
    let path = out.join("ranker.ckpt");
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `train` first",
            path.display()
        )));
    }
    let checkpoint = read_checkpoint(&path)?;
    let snapshot: RankerSnapshot = serde_json::from_str(&checkpoint.config_json)
        .map_err(|e| Error::Data(format!("ranker checkpoint snapshot is invalid: {e}")))?;
    let model = RankerModel::from_tensors(
        snapshot.ranker.clone(),
        snapshot.input_dim,
        snapshot.pretrain.clone(),
        &tensor_map(&checkpoint.tensors),
    )?;
    Ok((model, snapshot))
}

/// Run `evaluate`: score the test split with the trained ranker and write
/// the metric table.
pub fn cmd_evaluate(config: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let (dataset, _) = load_dataset_stage(config, out)?;
    let (user_emb, item_emb) = embeddings_for(config, &dataset)?;
    let (model, _) = load_ranker_checkpoint(out)?;
    let report = eval::evaluate_ranking(
        &dataset,
        &user_emb,
        &item_emb,
        |x| model.score(x),
        config.evaluation.negative_samples,
        &config.evaluation.k,
        config.evaluation.seed,
    )?;
    let model_name = model_id(config);
    let dataset_name = dataset_id(config);
    let seed = config.evaluation.seed;
    let mut csv = String::from("model,dataset,metric,k,value,seed\n");
    for (k, value) in &report.ndcg {
        csv.push_str(&format!("{model_name},{dataset_name},ndcg,{k},{value},{seed}\n"));
    }
    csv.push_str(&format!(
        "{model_name},{dataset_name},auc,,{},{seed}\n",
        report.auc
    ));
    std::fs::write(out.join("metrics.csv"), csv)?;
    write_json(
        &out.join("metrics.json"),
        &MetricsArtifact {
            config,
            model: &model_name,
            dataset: &dataset_name,
            report: &report,
        },
    )?;
    let ndcg_text: Vec<String> = report
        .ndcg
        .iter()
        .map(|(k, v)| format!("ndcg@{k} {v:.4}"))
        .collect();
    println!(
        "evaluate: {} lists, {}, auc {:.4} ({:?})",
        report.lists,
        ndcg_text.join(", "),
        report.auc,
        report.auc_source
    );
    Ok(report)
}

/// Cap on inputs fed to `analyze`, keeping its runtime bounded on large
/// train splits while staying deterministic (the first N positives).
const ANALYZE_INPUT_CAP: usize = 1024;

/// Run `analyze`: head-similarity and hidden-state statistics of the
/// pre-trained model over train-split positives.
pub fn cmd_analyze(config: &ExperimentConfig, out: &Path) -> Result<AnalysisReport> {
    let (dataset, _) = load_dataset_stage(config, out)?;
    let (user_emb, item_emb) = embeddings_for(config, &dataset)?;
    let model = load_pretrain_checkpoint(config, out)?;
    let mut inputs = data::build_pretrain_set(&dataset, &user_emb, &item_emb)?;
    inputs.truncate(ANALYZE_INPUT_CAP);
    let report = eval::head_cosine_stats(&model, &inputs)?;
    write_json(
        &out.join("analysis.json"),
        &AnalysisArtifact {
            config,
            inputs: inputs.len(),
            report: &report,
        },
    )?;
    let mut csv = String::new();
    let width = model.config.hidden_dim;
    csv.push_str(
        &(0..width)
            .map(|i| format!("h{i}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    csv.push('\n');
    for x in &inputs {
        let rep = model.extract(x)?;
        csv.push_str(
            &rep.values
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        csv.push('\n');
    }
    std::fs::write(out.join("hidden_states.csv"), csv)?;
    println!(
        "analyze: {} inputs, mean inter-head cosine {:.4}, hidden mean {:.4}, hidden variance {:.4}",
        inputs.len(),
        report.mean_cosine,
        report.mean_of_means,
        report.mean_of_variances
    );
    Ok(report)
}

/// Run `ablate`: the full recipe (ingest through evaluate, in memory)
/// twice, with and without one feature, same seeds.
pub fn cmd_ablate(config: &ExperimentConfig, out: &Path, feature: &str) -> Result<eval::AblationReport> {
    let (schema, _) = data::read_tsv(&config.dataset.path)?;
    let report = eval::feature_ablation(&schema, feature, |ablated| {
        let mut excluded = config.dataset.exclude.clone();
        excluded.extend(ablated.iter().cloned());
        let (dataset, _) = data::prepare(
            &config.dataset.path,
            config.dataset.positive_threshold,
            config.dataset.min_reviews,
            &config.dataset.split,
            config.dataset.seed,
            &excluded,
        )?;
        let (user_emb, item_emb) = embeddings_for(config, &dataset)?;
        let input_dim = dataset.input_dim(config.features.embedding_dim);
        let pretrained = match config.ranker.integration {
            IntegrationMode::None => None,
            _ => {
                let inputs = data::build_pretrain_set(&dataset, &user_emb, &item_emb)?;
                let (model, _) = pretrain::fit(&config.pretrain.to_config(input_dim), &inputs)?;
                Some(model)
            }
        };
        let examples = data::build_train_examples(
            &dataset,
            &user_emb,
            &item_emb,
            config.ranker.negative_rate,
            config.ranker.seed,
        )?;
        let (model, _) = ranker::fit(&config.ranker.to_config(), &examples, pretrained.as_ref())?;
        let report = eval::evaluate_ranking(
            &dataset,
            &user_emb,
            &item_emb,
            |x| model.score(x),
            config.evaluation.negative_samples,
            &config.evaluation.k,
            config.evaluation.seed,
        )?;
        Ok(report.auc)
    })?;
    write_json(&out.join("ablation.json"), &AblationArtifact { config, report: &report })?;
    println!(
        "ablate: {} auc {:.4} -> {:.4} without it, delta {:+.4}",
        report.feature, report.auc_full, report.auc_ablated, report.delta_auc
    );
    Ok(report)
}

/// Entry point behind `main`: load the config and dispatch the command.
pub fn run(args: &CliArgs) -> Result<()> {
    let config_path = args
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <PATH> is required".into()))?;
    let config = load_config(config_path, args.preset.as_deref(), args.seed)?;
    if !config.dataset.path.exists() {
        return Err(Error::Data(format!(
            "dataset.path {} does not exist",
            config.dataset.path.display()
        )));
    }
    let out = resolve_output(args.output.as_deref(), &config)?;
    std::fs::create_dir_all(&out)?;
    match &args.command {
        Command::Ingest => cmd_ingest(&config, &out).map(|_| ()),
        Command::Pretrain => cmd_pretrain(&config, &out).map(|_| ()),
        Command::Train => cmd_train(&config, &out).map(|_| ()),
        Command::Evaluate => cmd_evaluate(&config, &out).map(|_| ()),
        Command::Analyze => cmd_analyze(&config, &out).map(|_| ()),
        Command::Ablate { feature } => cmd_ablate(&config, &out, feature).map(|_| ()),
    }
}
