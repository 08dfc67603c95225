//! Dataset ingestion and preparation: TSV parsing, implicit-feedback
//! conversion, activity filtering, train/test splitting, negative sampling,
//! feature encoding, and assembly of model-ready example sets.
//!
//! The input format is a TSV with a declared header: `user_id`, `item_id`,
//! `rating` (stars) or `label` (0/1), an optional `timestamp`, then context
//! columns prefixed `c.` (categorical) or `d.` (dense). Everything fitted at
//! preparation time (vocabularies, normalization statistics, split
//! membership) is captured in a [`DatasetManifest`] so the exact dataset can
//! be rebuilt from the manifest plus the original file.

use crate::error::{Error, Result};
use crate::features::{assemble_input, lookup_embedding, EmbeddingTable, EntityKind, OovPolicy};
use crate::ranker::LabeledExample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Whether the third TSV column holds star ratings or binary labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Rating,
    Label,
}

/// Declared column layout of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub value_kind: ValueKind,
    pub has_timestamp: bool,
    /// `c.`-prefixed column names, in file order, without the prefix.
    pub categorical: Vec<String>,
    /// `d.`-prefixed column names, in file order, without the prefix.
    pub dense: Vec<String>,
}

impl Schema {
    /// All context feature names (categorical then dense).
    pub fn feature_names(&self) -> Vec<String> {
        self.categorical
            .iter()
            .chain(self.dense.iter())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextValue {
    Categorical(String),
    Dense(f64),
}

/// One row of a dataset: a user/item event with its explicit context.
/// `value` is the raw rating before conversion, a 0/1 label after.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub value: f64,
    pub timestamp: Option<i64>,
    pub context: BTreeMap<String, ContextValue>,
}

impl Interaction {
    pub fn is_positive(&self) -> bool {
        self.value == 1.0
    }
}

fn data_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line}: {msg}"))
}

/// Parse TSV text into a schema and interactions. Line 1 must be the header;
/// every data row must match it exactly.
pub fn parse_tsv(text: &str) -> Result<(Schema, Vec<Interaction>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("empty dataset file".into()))?;
    let columns: Vec<&str> = header.split('\t').collect();
    if columns.len() < 3 || columns[0] != "user_id" || columns[1] != "item_id" {
        return Err(Error::Data(
            "header must start with user_id, item_id, then rating or label".into(),
        ));
    }
    let value_kind = match columns[2] {
        "rating" => ValueKind::Rating,
        "label" => ValueKind::Label,
        other => {
            return Err(Error::Data(format!(
                "third column must be rating or label, found {other}"
            )))
        }
    };
    let mut rest = 3;
    let has_timestamp = columns.get(3) == Some(&"timestamp");
    if has_timestamp {
        rest = 4;
    }
    let mut categorical = Vec::new();
    let mut dense = Vec::new();
    let mut seen = BTreeSet::new();
    let context_columns: Vec<(&str, bool)> = columns[rest..]
        .iter()
        .map(|col| {
            if let Some(name) = col.strip_prefix("c.") {
                categorical.push(name.to_string());
                Ok((name, true))
            } else if let Some(name) = col.strip_prefix("d.") {
                dense.push(name.to_string());
                Ok((name, false))
            } else {
                Err(Error::Data(format!(
                    "context column {col} must be prefixed c. or d."
                )))
            }
        })
        .collect::<Result<_>>()?;
    for (name, _) in &context_columns {
        if !seen.insert(*name) {
            return Err(Error::Data(format!("duplicate context column {name}")));
        }
    }

    let mut interactions = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(data_err(
                lineno,
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        let user: u64 = fields[0]
            .parse()
            .map_err(|_| data_err(lineno, format!("user_id {} is not a non-negative integer", fields[0])))?;
        let item: u64 = fields[1]
            .parse()
            .map_err(|_| data_err(lineno, format!("item_id {} is not a non-negative integer", fields[1])))?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| data_err(lineno, format!("value {} is not a number", fields[2])))?;
        if !value.is_finite() {
            return Err(data_err(lineno, "value is not finite"));
        }
        if value_kind == ValueKind::Label && value != 0.0 && value != 1.0 {
            return Err(data_err(lineno, format!("label {value} must be 0 or 1")));
        }
        let timestamp = if has_timestamp {
            Some(fields[3].parse::<i64>().map_err(|_| {
                data_err(lineno, format!("timestamp {} is not an integer", fields[3]))
            })?)
        } else {
            None
        };
        let mut context = BTreeMap::new();
        for ((name, is_cat), raw) in context_columns.iter().zip(&fields[rest..]) {
            let value = if *is_cat {
                ContextValue::Categorical(raw.to_string())
            } else {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| data_err(lineno, format!("dense feature {name}={raw} is not a number")))?;
                if !v.is_finite() {
                    return Err(data_err(lineno, format!("dense feature {name} is not finite")));
                }
                ContextValue::Dense(v)
            };
            context.insert(name.to_string(), value);
        }
        interactions.push(Interaction {
            user,
            item,
            value,
            timestamp,
            context,
        });
    }
    Ok((
        Schema {
            value_kind,
            has_timestamp,
            categorical,
            dense,
        },
        interactions,
    ))
}

/// Read and parse a TSV dataset file.
pub fn read_tsv(path: &Path) -> Result<(Schema, Vec<Interaction>)> {
    let text = std::fs::read_to_string(path)?;
    parse_tsv(&text)
}

/// Drop every user with fewer than `min_reviews` interactions.
pub fn filter_min_reviews(interactions: Vec<Interaction>, min_reviews: usize) -> Vec<Interaction> {
    if min_reviews == 0 {
        return interactions;
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for it in &interactions {
        *counts.entry(it.user).or_default() += 1;
    }
    interactions
        .into_iter()
        .filter(|it| counts[&it.user] >= min_reviews)
        .collect()
}

/// Convert star ratings to implicit 0/1 feedback: `rating >= threshold`
/// becomes 1, anything lower 0. Users with fewer than `min_reviews`
/// interactions are removed entirely. Ratings must sit in the 1-5 star
/// scale.
pub fn convert_implicit(
    interactions: Vec<Interaction>,
    positive_threshold: f64,
    min_reviews: usize,
) -> Result<Vec<Interaction>> {
    for it in &interactions {
        if !(1.0..=5.0).contains(&it.value) {
            return Err(Error::Data(format!(
                "rating {} for user {} item {} is outside the 1-5 star scale",
                it.value, it.user, it.item
            )));
        }
    }
    let converted = interactions
        .into_iter()
        .map(|mut it| {
            it.value = if it.value >= positive_threshold { 1.0 } else { 0.0 };
            it
        })
        .collect();
    Ok(filter_min_reviews(converted, min_reviews))
}

/// Train/test split strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Per-user random split: `fraction` of each user's interactions train.
    Ratio { fraction: f64 },
    /// One random positive per user held out for testing.
    LeaveOneOut,
    /// Timestamps before `cutoff` train, the rest test.
    TimeCutoff { cutoff: i64 },
}

fn user_rng(seed: u64, user: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user);
    rng
}

/// Split interactions into train and test row indices. Per-user randomness
/// is keyed by (seed, user id), so the split of one user never depends on
/// how many other users the file holds. Both index lists come back sorted.
pub fn split_dataset(
    interactions: &[Interaction],
    strategy: &SplitStrategy,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut per_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, it) in interactions.iter().enumerate() {
        per_user.entry(it.user).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    match strategy {
        SplitStrategy::Ratio { fraction } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::Config(format!(
                    "split fraction {fraction} must be in (0, 1)"
                )));
            }
            for (user, mut rows) in per_user {
                let mut rng = user_rng(seed, user);
                rows.shuffle(&mut rng);
                let n_train = (rows.len() as f64 * fraction + 1e-9).floor() as usize;
                train.extend_from_slice(&rows[..n_train]);
                test.extend_from_slice(&rows[n_train..]);
            }
        }
        SplitStrategy::LeaveOneOut => {
            for (user, rows) in per_user {
                let positives: Vec<usize> = rows
                    .iter()
                    .copied()
                    .filter(|&i| interactions[i].is_positive())
                    .collect();
                if positives.is_empty() {
                    return Err(Error::Data(format!(
                        "user {user} has no positive interaction to hold out"
                    )));
                }
                let mut rng = user_rng(seed, user);
                let held = positives[rng.gen_range(0..positives.len())];
                test.push(held);
                train.extend(rows.iter().copied().filter(|&i| i != held));
            }
        }
        SplitStrategy::TimeCutoff { cutoff } => {
            for (i, it) in interactions.iter().enumerate() {
                let ts = it.timestamp.ok_or_else(|| {
                    Error::Data(format!(
                        "row {i} has no timestamp; time_cutoff needs one on every row"
                    ))
                })?;
                if ts < *cutoff {
                    train.push(i);
                } else {
                    test.push(i);
                }
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Draw `ns` distinct items uniformly from the catalog, excluding the user's
/// positives. Deterministic for a given (seed, user): the same call always
/// returns the same items.
pub fn negative_sample(
    user: u64,
    catalog: &[u64],
    positives: &BTreeSet<u64>,
    ns: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    if ns == 0 {
        return Ok(Vec::new());
    }
    let mut candidates: Vec<u64> = catalog
        .iter()
        .copied()
        .filter(|item| !positives.contains(item))
        .collect();
    if candidates.len() < ns {
        return Err(Error::Sampling(format!(
            "user {user}: need {ns} negatives but only {} non-positive items exist",
            candidates.len()
        )));
    }
    let mut rng = user_rng(seed, user);
    for i in 0..ns {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(ns);
    Ok(candidates)
}

/// Fitted feature encoding: id vocabularies, one-hot vocabularies for
/// categorical context columns, and min/max statistics for dense columns.
/// Everything is fitted on the train split only; unseen values at encode
/// time map to the out-of-vocabulary bucket (categorical) or are clamped
/// into the fitted range (dense). Columns in `excluded` are dropped
/// entirely, which is how leave-one-feature-out ablation works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub users: BTreeMap<u64, usize>,
    pub items: BTreeMap<u64, usize>,
    pub categorical: BTreeMap<String, BTreeMap<String, usize>>,
    pub categorical_order: Vec<String>,
    pub dense: BTreeMap<String, (f64, f64)>,
    pub dense_order: Vec<String>,
    pub excluded: BTreeSet<String>,
}

impl FeatureEncoder {
    /// Fit vocabularies and statistics on the given (train) interactions.
    pub fn fit(
        schema: &Schema,
        train: &[&Interaction],
        excluded: &BTreeSet<String>,
    ) -> Result<FeatureEncoder> {
        let known: BTreeSet<String> = schema.feature_names().into_iter().collect();
        if let Some(bad) = excluded.iter().find(|name| !known.contains(*name)) {
            return Err(Error::Config(format!(
                "excluded feature {bad} is not in the schema (known: {})",
                known.iter().cloned().collect::<Vec<_>>().join(", ")
            )));
        }
        let mut users = BTreeMap::new();
        let mut items = BTreeMap::new();
        for it in train {
            let next = users.len();
            users.entry(it.user).or_insert(next);
            let next = items.len();
            items.entry(it.item).or_insert(next);
        }
        // re-index in sorted id order so the mapping is independent of row order
        let users: BTreeMap<u64, usize> = users
            .keys()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let items: BTreeMap<u64, usize> = items
            .keys()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();

        let categorical_order: Vec<String> = schema
            .categorical
            .iter()
            .filter(|n| !excluded.contains(*n))
            .cloned()
            .collect();
        let dense_order: Vec<String> = schema
            .dense
            .iter()
            .filter(|n| !excluded.contains(*n))
            .cloned()
            .collect();

        let mut categorical: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for name in &categorical_order {
            let mut values = BTreeSet::new();
            for it in train {
                match it.context.get(name) {
                    Some(ContextValue::Categorical(v)) => {
                        values.insert(v.clone());
                    }
                    _ => return Err(Error::Data(format!("missing categorical feature {name}"))),
                }
            }
            categorical.insert(
                name.clone(),
                values.into_iter().enumerate().map(|(i, v)| (v, i)).collect(),
            );
        }
        let mut dense: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for name in &dense_order {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for it in train {
                match it.context.get(name) {
                    Some(ContextValue::Dense(v)) => {
                        min = min.min(*v);
                        max = max.max(*v);
                    }
                    _ => return Err(Error::Data(format!("missing dense feature {name}"))),
                }
            }
            dense.insert(name.clone(), (min, max));
        }
        Ok(FeatureEncoder {
            users,
            items,
            categorical,
            categorical_order,
            dense,
            dense_order,
            excluded: excluded.clone(),
        })
    }

    /// Dense index for a raw user id; unseen ids map to the OOV slot
    /// `user_vocab()`.
    pub fn user_index(&self, user: u64) -> usize {
        self.users.get(&user).copied().unwrap_or(self.users.len())
    }

    pub fn item_index(&self, item: u64) -> usize {
        self.items.get(&item).copied().unwrap_or(self.items.len())
    }

    pub fn user_vocab(&self) -> usize {
        self.users.len()
    }

    pub fn item_vocab(&self) -> usize {
        self.items.len()
    }

    /// Width of the encoded side-feature vector: one-hot widths (vocabulary
    /// plus an OOV bucket) plus one slot per dense column.
    pub fn side_dim(&self) -> usize {
        self.categorical_order
            .iter()
            .map(|n| self.categorical[n].len() + 1)
            .sum::<usize>()
            + self.dense_order.len()
    }

    /// Encode an interaction's context into the side-feature vector:
    /// categorical one-hots (OOV bucket last) in column order, then
    /// normalized dense values clamped to [0, 1].
    pub fn side_features(&self, interaction: &Interaction) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.side_dim());
        for name in &self.categorical_order {
            let vocab = &self.categorical[name];
            let slot = match interaction.context.get(name) {
                Some(ContextValue::Categorical(v)) => {
                    vocab.get(v).copied().unwrap_or(vocab.len())
                }
                _ => {
                    return Err(Error::Data(format!(
                        "interaction is missing categorical feature {name}"
                    )))
                }
            };
            let width = vocab.len() + 1;
            let start = out.len();
            out.resize(start + width, 0.0);
            out[start + slot] = 1.0;
        }
        for name in &self.dense_order {
            let (min, max) = self.dense[name];
            let v = match interaction.context.get(name) {
                Some(ContextValue::Dense(v)) => *v,
                _ => {
                    return Err(Error::Data(format!(
                        "interaction is missing dense feature {name}"
                    )))
                }
            };
            let normalized = if max > min { (v - min) / (max - min) } else { 0.0 };
            out.push(normalized.clamp(0.0, 1.0));
        }
        Ok(out)
    }
}

/// A prepared dataset: converted interactions split into train/test, the
/// fitted encoder, the item catalog, and per-user positive-item indexes
/// (train-only for training-time sampling, full for evaluation-time
/// sampling).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: Schema,
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub encoder: FeatureEncoder,
    pub catalog: Vec<u64>,
    pub train_positives: BTreeMap<u64, BTreeSet<u64>>,
    pub all_positives: BTreeMap<u64, BTreeSet<u64>>,
}

impl Dataset {
    /// Assemble a dataset from converted interactions and split membership,
    /// fitting the feature encoder on the train rows.
    pub fn build(
        schema: Schema,
        interactions: &[Interaction],
        train_rows: &[usize],
        test_rows: &[usize],
        excluded: &BTreeSet<String>,
    ) -> Result<Dataset> {
        let train: Vec<Interaction> = train_rows.iter().map(|&i| interactions[i].clone()).collect();
        let test: Vec<Interaction> = test_rows.iter().map(|&i| interactions[i].clone()).collect();
        if train.is_empty() {
            return Err(Error::Data("train split is empty".into()));
        }
        let encoder = FeatureEncoder::fit(&schema, &train.iter().collect::<Vec<_>>(), excluded)?;
        let catalog: BTreeSet<u64> = train.iter().chain(&test).map(|it| it.item).collect();
        let mut train_positives: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for it in train.iter().filter(|it| it.is_positive()) {
            train_positives.entry(it.user).or_default().insert(it.item);
        }
        let mut all_positives = train_positives.clone();
        for it in test.iter().filter(|it| it.is_positive()) {
            all_positives.entry(it.user).or_default().insert(it.item);
        }
        Ok(Dataset {
            schema,
            train,
            test,
            encoder,
            catalog: catalog.into_iter().collect(),
            train_positives,
            all_positives,
        })
    }

    /// Assemble the model input for an interaction, optionally swapping the
    /// item id (used to score sampled negatives under the positive row's
    /// context).
    pub fn assemble(
        &self,
        user_emb: &EmbeddingTable,
        item_emb: &EmbeddingTable,
        interaction: &Interaction,
        item_override: Option<u64>,
    ) -> Result<Vec<f64>> {
        let item = item_override.unwrap_or(interaction.item);
        let e_u = lookup_embedding(user_emb, self.encoder.user_index(interaction.user))?;
        let e_i = lookup_embedding(item_emb, self.encoder.item_index(item))?;
        let side = self.encoder.side_features(interaction)?;
        Ok(assemble_input(&e_u, &e_i, &side)?.values)
    }

    /// Assembled input width for this dataset and embedding dimension.
    pub fn input_dim(&self, embedding_dim: usize) -> usize {
        3 * embedding_dim + self.encoder.side_dim()
    }
}

/// Seeded user and item embedding tables sized to the encoder's
/// vocabularies, with a zero fallback row for out-of-vocabulary ids.
pub fn init_embeddings(
    encoder: &FeatureEncoder,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let mut user_rng = ChaCha8Rng::seed_from_u64(seed);
    user_rng.set_stream(3);
    let mut item_rng = ChaCha8Rng::seed_from_u64(seed);
    item_rng.set_stream(4);
    let user_emb = EmbeddingTable::init(
        EntityKind::User,
        encoder.user_vocab(),
        dim,
        OovPolicy::Fallback,
        &mut user_rng,
    )?;
    let item_emb = EmbeddingTable::init(
        EntityKind::Item,
        encoder.item_vocab(),
        dim,
        OovPolicy::Fallback,
        &mut item_rng,
    )?;
    Ok((user_emb, item_emb))
}

/// Assembled inputs for pre-training: exactly the positive rows of the
/// train split. An empty result (no positives) is returned as-is; training
/// rejects it downstream.
pub fn build_pretrain_set(
    dataset: &Dataset,
    user_emb: &EmbeddingTable,
    item_emb: &EmbeddingTable,
) -> Result<Vec<Vec<f64>>> {
    dataset
        .train
        .iter()
        .filter(|it| it.is_positive())
        .map(|it| dataset.assemble(user_emb, item_emb, it, None))
        .collect()
}

/// Supervised training examples: every train row as-is, plus
/// `negative_rate` sampled negatives per positive row (same user and
/// context, swapped item, label 0). Sampling excludes the user's train-split
/// positives and is keyed per row, so the set is reproducible.
pub fn build_train_examples(
    dataset: &Dataset,
    user_emb: &EmbeddingTable,
    item_emb: &EmbeddingTable,
    negative_rate: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let empty = BTreeSet::new();
    let mut out = Vec::new();
    for (row, it) in dataset.train.iter().enumerate() {
        out.push(LabeledExample {
            features: dataset.assemble(user_emb, item_emb, it, None)?,
            label: it.value,
        });
        if it.is_positive() && negative_rate > 0 {
            let positives = dataset.train_positives.get(&it.user).unwrap_or(&empty);
            let row_seed = seed.wrapping_add((row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for item in negative_sample(it.user, &dataset.catalog, positives, negative_rate, row_seed)? {
                out.push(LabeledExample {
                    features: dataset.assemble(user_emb, item_emb, it, Some(item))?,
                    label: 0.0,
                });
            }
        }
    }
    Ok(out)
}

/// Everything needed to rebuild a prepared dataset from the source file:
/// conversion parameters, split membership (row indices into the converted
/// interaction list), and the fitted encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub schema: Schema,
    pub positive_threshold: f64,
    pub min_reviews: usize,
    pub split: SplitStrategy,
    pub seed: u64,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub encoder: FeatureEncoder,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("invalid manifest: {e}")))
    }
}

/// Full preparation pass: read the TSV, convert ratings to implicit labels
/// (or validate explicit ones), filter inactive users, split, and fit the
/// encoder. Returns the dataset plus a manifest that reproduces it exactly.
pub fn prepare(
    path: &Path,
    positive_threshold: f64,
    min_reviews: usize,
    split: &SplitStrategy,
    seed: u64,
    excluded: &BTreeSet<String>,
) -> Result<(Dataset, DatasetManifest)> {
    let (schema, raw) = read_tsv(path)?;
    if raw.is_empty() {
        return Err(Error::Data(format!("{} holds no interactions", path.display())));
    }
    let converted = match schema.value_kind {
        ValueKind::Rating => convert_implicit(raw, positive_threshold, min_reviews)?,
        ValueKind::Label => filter_min_reviews(raw, min_reviews),
    };
    if converted.is_empty() {
        return Err(Error::Data(format!(
            "no interactions survive the min_reviews={min_reviews} filter"
        )));
    }
    let (train_rows, test_rows) = split_dataset(&converted, split, seed)?;
    let dataset = Dataset::build(schema.clone(), &converted, &train_rows, &test_rows, excluded)?;
    let manifest = DatasetManifest {
        source: path.display().to_string(),
        schema,
        positive_threshold,
        min_reviews,
        split: split.clone(),
        seed,
        train_rows,
        test_rows,
        encoder: dataset.encoder.clone(),
    };
    Ok((dataset, manifest))
}

/// Rebuild the dataset a manifest describes, re-reading the source TSV. The
/// stored split membership and encoder are used verbatim; the file must
/// still produce the same converted interaction list.
pub fn load_prepared(path: &Path, manifest: &DatasetManifest) -> Result<Dataset> {
    let (schema, raw) = read_tsv(path)?;
    if schema != manifest.schema {
        return Err(Error::Data(format!(
            "{} no longer matches the manifest schema",
            path.display()
        )));
    }
    let converted = match schema.value_kind {
        ValueKind::Rating => {
            convert_implicit(raw, manifest.positive_threshold, manifest.min_reviews)?
        }
        ValueKind::Label => filter_min_reviews(raw, manifest.min_reviews),
    };
    if let Some(&bad) = manifest
        .train_rows
        .iter()
        .chain(&manifest.test_rows)
        .find(|&&i| i >= converted.len())
    {
        return Err(Error::Data(format!(
            "manifest row {bad} is out of range; the source file has changed"
        )));
    }
    let dataset = Dataset::build(
        manifest.schema.clone(),
        &converted,
        &manifest.train_rows,
        &manifest.test_rows,
        &manifest.encoder.excluded,
    )?;
    if dataset.encoder != manifest.encoder {
        return Err(Error::Data(
            "re-fitted encoder disagrees with the manifest; the source file has changed".into(),
        ));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tsv_review() -> String {
        let mut s = String::from("user_id\titem_id\trating\tc.daypart\td.distance\n");
        // user 1: 4 rows, user 2: 3 rows, user 3: 1 row
        for (u, i, r, c, d) in [
            (1, 10, 5.0, "lunch", 0.5),
            (1, 11, 4.0, "dinner", 1.5),
            (1, 12, 3.0, "lunch", 2.5),
            (1, 13, 1.0, "night", 0.5),
            (2, 10, 4.0, "dinner", 3.5),
            (2, 12, 5.0, "lunch", 1.0),
            (2, 13, 2.0, "lunch", 2.0),
            (3, 11, 5.0, "night", 4.0),
        ] {
            s.push_str(&format!("{u}\t{i}\t{r}\t{c}\t{d}\n"));
        }
        s
    }

    fn converted() -> (Schema, Vec<Interaction>) {
        let (schema, raw) = parse_tsv(&tsv_review()).unwrap();
        let converted = convert_implicit(raw, 4.0, 0).unwrap();
        (schema, converted)
    }

    #[test]
    fn parse_header_and_rows() {
        let (schema, rows) = parse_tsv(&tsv_review()).unwrap();
        assert_eq!(schema.value_kind, ValueKind::Rating);
        assert!(!schema.has_timestamp);
        assert_eq!(schema.categorical, vec!["daypart"]);
        assert_eq!(schema.dense, vec!["distance"]);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].user, 1);
        assert_eq!(rows[0].item, 10);
        assert_eq!(
            rows[0].context["daypart"],
            ContextValue::Categorical("lunch".into())
        );
        assert_eq!(rows[0].context["distance"], ContextValue::Dense(0.5));
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(parse_tsv("").is_err());
        assert!(parse_tsv("user_id\titem_id\tstars\n").is_err());
        assert!(parse_tsv("user_id\titem_id\trating\tweird\n").is_err());
        let err = parse_tsv("user_id\titem_id\trating\n1\t2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_tsv("user_id\titem_id\trating\n-1\t2\t5\n").is_err());
        assert!(parse_tsv("user_id\titem_id\tlabel\n1\t2\t0.7\n").is_err());
        assert!(parse_tsv("user_id\titem_id\trating\td.x\n1\t2\t5\tnope\n").is_err());
    }

    #[test]
    fn parse_timestamp_column() {
        let text = "user_id\titem_id\tlabel\ttimestamp\n7\t8\t1\t1700000000\n";
        let (schema, rows) = parse_tsv(text).unwrap();
        assert!(schema.has_timestamp);
        assert_eq!(rows[0].timestamp, Some(1_700_000_000));
    }

    #[test]
    fn convert_threshold_and_scale() {
        let (_, converted) = converted();
        // 4 and 5 stars positive, below negative
        assert_eq!(converted[0].value, 1.0);
        assert_eq!(converted[1].value, 1.0);
        assert_eq!(converted[2].value, 0.0);
        assert_eq!(converted[3].value, 0.0);

        let (_, raw) = parse_tsv("user_id\titem_id\trating\n1\t2\t7\n").unwrap();
        assert!(matches!(
            convert_implicit(raw, 4.0, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn convert_min_reviews_filter() {
        let (_, raw) = parse_tsv(&tsv_review()).unwrap();
        // user 3 has one review; a threshold of 2 drops them
        let kept = convert_implicit(raw.clone(), 4.0, 2).unwrap();
        assert!(kept.iter().all(|it| it.user != 3));
        assert_eq!(kept.len(), 7);
        // min 0 keeps everyone
        assert_eq!(convert_implicit(raw, 4.0, 0).unwrap().len(), 8);
    }

    #[test]
    fn ratio_split_counts() {
        let text = {
            let mut s = String::from("user_id\titem_id\trating\n");
            for i in 0..10 {
                s.push_str(&format!("1\t{i}\t5\n"));
            }
            s
        };
        let (_, raw) = parse_tsv(&text).unwrap();
        let converted = convert_implicit(raw, 4.0, 0).unwrap();
        let (train, test) =
            split_dataset(&converted, &SplitStrategy::Ratio { fraction: 0.8 }, 7).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        let overlap: Vec<_> = train.iter().filter(|i| test.contains(i)).collect();
        assert!(overlap.is_empty());
    }

    #[test]
    fn ratio_split_validates_fraction() {
        let (_, converted) = converted();
        for bad in [0.0, 1.0, -0.5, 1.5] {
            assert!(matches!(
                split_dataset(&converted, &SplitStrategy::Ratio { fraction: bad }, 1),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn leave_one_out_holds_one_positive() {
        let (_, converted) = converted();
        let (train, test) = split_dataset(&converted, &SplitStrategy::LeaveOneOut, 5).unwrap();
        assert_eq!(train.len() + test.len(), converted.len());
        let mut held: BTreeMap<u64, usize> = BTreeMap::new();
        for &i in &test {
            assert!(converted[i].is_positive(), "held-out row must be positive");
            *held.entry(converted[i].user).or_default() += 1;
        }
        assert_eq!(held.len(), 3);
        assert!(held.values().all(|&n| n == 1));
    }

    #[test]
    fn leave_one_out_names_user_without_positives() {
        let text = "user_id\titem_id\trating\n42\t1\t2\n42\t2\t1\n";
        let (_, raw) = parse_tsv(text).unwrap();
        let converted = convert_implicit(raw, 4.0, 0).unwrap();
        let err = split_dataset(&converted, &SplitStrategy::LeaveOneOut, 1).unwrap_err();
        assert!(err.to_string().contains("42"), "{err}");
    }

    #[test]
    fn splits_are_deterministic() {
        let (_, converted) = converted();
        for strategy in [
            SplitStrategy::Ratio { fraction: 0.5 },
            SplitStrategy::LeaveOneOut,
        ] {
            let a = split_dataset(&converted, &strategy, 99).unwrap();
            let b = split_dataset(&converted, &strategy, 99).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn time_cutoff_split() {
        let text = "user_id\titem_id\tlabel\ttimestamp\n1\t1\t1\t100\n1\t2\t0\t200\n1\t3\t1\t300\n";
        let (_, rows) = parse_tsv(text).unwrap();
        let (train, test) =
            split_dataset(&rows, &SplitStrategy::TimeCutoff { cutoff: 200 }, 0).unwrap();
        assert_eq!(train, vec![0]);
        assert_eq!(test, vec![1, 2]);

        let text = "user_id\titem_id\tlabel\n1\t1\t1\n";
        let (_, rows) = parse_tsv(text).unwrap();
        assert!(split_dataset(&rows, &SplitStrategy::TimeCutoff { cutoff: 0 }, 0).is_err());
    }

    #[test]
    fn negative_sample_basics() {
        let catalog = vec![1, 2, 3];
        let positives: BTreeSet<u64> = [1].into();
        assert!(negative_sample(9, &catalog, &positives, 0, 0).unwrap().is_empty());
        let mut got = negative_sample(9, &catalog, &positives, 2, 0).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![2, 3]);
        assert!(matches!(
            negative_sample(9, &catalog, &positives, 3, 0),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn negative_sample_distinct_and_disjoint() {
        let catalog: Vec<u64> = (0..500).collect();
        let positives: BTreeSet<u64> = (0..50).collect();
        let sample = negative_sample(3, &catalog, &positives, 50, 11).unwrap();
        assert_eq!(sample.len(), 50);
        let unique: BTreeSet<u64> = sample.iter().copied().collect();
        assert_eq!(unique.len(), 50);
        assert!(unique.is_disjoint(&positives));
        assert_eq!(sample, negative_sample(3, &catalog, &positives, 50, 11).unwrap());
        assert_ne!(sample, negative_sample(3, &catalog, &positives, 50, 12).unwrap());
    }

    fn prepared() -> Dataset {
        let (schema, converted) = converted();
        let (train_rows, test_rows) =
            split_dataset(&converted, &SplitStrategy::Ratio { fraction: 0.5 }, 3).unwrap();
        Dataset::build(schema, &converted, &train_rows, &test_rows, &BTreeSet::new()).unwrap()
    }

    #[test]
    fn encoder_one_hot_layout() {
        let ds = prepared();
        let enc = &ds.encoder;
        // one categorical column with an OOV bucket plus one dense column
        let vocab = &enc.categorical["daypart"];
        assert_eq!(enc.side_dim(), vocab.len() + 1 + 1);
        let side = enc.side_features(&ds.train[0]).unwrap();
        assert_eq!(side.len(), enc.side_dim());
        let one_hot_sum: f64 = side[..vocab.len() + 1].iter().sum();
        assert_eq!(one_hot_sum, 1.0);

        // unseen categorical value lands in the OOV bucket
        let mut oov = ds.train[0].clone();
        oov.context
            .insert("daypart".into(), ContextValue::Categorical("brunch".into()));
        let side = enc.side_features(&oov).unwrap();
        assert_eq!(side[vocab.len()], 1.0);
    }

    #[test]
    fn encoder_minmax_normalization() {
        let ds = prepared();
        let (min, max) = ds.encoder.dense["distance"];
        assert!(max > min);
        let mut probe = ds.train[0].clone();
        for (v, expected) in [(min, 0.0), (max, 1.0), (min - 100.0, 0.0), (max + 100.0, 1.0)] {
            probe.context.insert("distance".into(), ContextValue::Dense(v));
            let side = ds.encoder.side_features(&probe).unwrap();
            assert_eq!(*side.last().unwrap(), expected);
        }
        probe
            .context
            .insert("distance".into(), ContextValue::Dense((min + max) / 2.0));
        let side = ds.encoder.side_features(&probe).unwrap();
        assert!((side.last().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn encoder_constant_dense_maps_to_zero() {
        let text = "user_id\titem_id\tlabel\td.flat\n1\t1\t1\t3.0\n1\t2\t0\t3.0\n";
        let (schema, rows) = parse_tsv(text).unwrap();
        let enc =
            FeatureEncoder::fit(&schema, &rows.iter().collect::<Vec<_>>(), &BTreeSet::new())
                .unwrap();
        assert_eq!(enc.side_features(&rows[0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn encoder_exclusion_drops_column() {
        let ds = prepared();
        let (schema, converted) = converted();
        let excluded: BTreeSet<String> = ["daypart".to_string()].into();
        let enc = FeatureEncoder::fit(
            &schema,
            &converted.iter().collect::<Vec<_>>(),
            &excluded,
        )
        .unwrap();
        assert_eq!(enc.side_dim(), 1);
        assert!(enc.side_dim() < ds.encoder.side_dim());

        let unknown: BTreeSet<String> = ["bogus".to_string()].into();
        assert!(matches!(
            FeatureEncoder::fit(&schema, &converted.iter().collect::<Vec<_>>(), &unknown),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretrain_set_is_exactly_train_positives() {
        let ds = prepared();
        let (user_emb, item_emb) = init_embeddings(&ds.encoder, 4, 50).unwrap();
        let set = build_pretrain_set(&ds, &user_emb, &item_emb).unwrap();
        let positives = ds.train.iter().filter(|it| it.is_positive()).count();
        assert_eq!(set.len(), positives);
        for x in &set {
            assert_eq!(x.len(), ds.input_dim(4));
        }
    }

    #[test]
    fn train_examples_with_negative_rate() {
        let ds = prepared();
        let (user_emb, item_emb) = init_embeddings(&ds.encoder, 4, 50).unwrap();
        let base = build_train_examples(&ds, &user_emb, &item_emb, 0, 7).unwrap();
        assert_eq!(base.len(), ds.train.len());
        let positives = ds.train.iter().filter(|it| it.is_positive()).count();
        let with_negs = build_train_examples(&ds, &user_emb, &item_emb, 1, 7).unwrap();
        assert_eq!(with_negs.len(), ds.train.len() + positives);
        assert!(with_negs.iter().all(|ex| ex.label == 0.0 || ex.label == 1.0));
        assert_eq!(
            with_negs.len(),
            build_train_examples(&ds, &user_emb, &item_emb, 1, 7).unwrap().len()
        );
    }

    #[test]
    fn manifest_roundtrip_rebuilds_identical_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let tsv_path = dir.path().join("data.tsv");
        std::fs::write(&tsv_path, tsv_review()).unwrap();
        let (ds, manifest) = prepare(
            &tsv_path,
            4.0,
            0,
            &SplitStrategy::LeaveOneOut,
            13,
            &BTreeSet::new(),
        )
        .unwrap();
        let manifest_path = dir.path().join("manifest.json");
        manifest.save(&manifest_path).unwrap();
        let loaded = DatasetManifest::load(&manifest_path).unwrap();
        assert_eq!(manifest, loaded);
        let rebuilt = load_prepared(&tsv_path, &loaded).unwrap();
        assert_eq!(ds.train, rebuilt.train);
        assert_eq!(ds.test, rebuilt.test);
        assert_eq!(ds.encoder, rebuilt.encoder);
        assert_eq!(ds.catalog, rebuilt.catalog);
    }

    #[test]
    fn load_prepared_detects_changed_file() {
        let dir = tempfile::tempdir().unwrap();
        let tsv_path = dir.path().join("data.tsv");
        std::fs::write(&tsv_path, tsv_review()).unwrap();
        let (_, manifest) = prepare(
            &tsv_path,
            4.0,
            0,
            &SplitStrategy::LeaveOneOut,
            13,
            &BTreeSet::new(),
        )
        .unwrap();
        std::fs::write(&tsv_path, "user_id\titem_id\trating\n1\t1\t5\n").unwrap();
        assert!(load_prepared(&tsv_path, &manifest).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn splits_partition_rows(seed in 0u64..200, fraction in 0.1f64..0.9) {
            let (_, converted) = converted();
            let (train, test) =
                split_dataset(&converted, &SplitStrategy::Ratio { fraction }, seed).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..converted.len()).collect::<Vec<_>>());
        }

        #[test]
        fn negatives_never_collide(seed in 0u64..200, ns in 1usize..40) {
            let catalog: Vec<u64> = (0..60).collect();
            let positives: BTreeSet<u64> = [2, 5, 11, 17, 23].into();
            let sample = negative_sample(1, &catalog, &positives, ns, seed).unwrap();
            prop_assert_eq!(sample.len(), ns);
            let unique: BTreeSet<u64> = sample.iter().copied().collect();
            prop_assert_eq!(unique.len(), ns);
            prop_assert!(unique.is_disjoint(&positives));
        }
    }
}
