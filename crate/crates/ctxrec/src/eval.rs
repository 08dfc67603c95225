//! Ranking metrics, representation analysis, and feature-importance
//! measurement.
//!
//! Metrics follow the exact definitions used for the reported experiments:
//! NDCG@K with a `1/log2(rank+1)` gain on binary relevance, and AUC as the
//! exact probability that a random positive outranks a random negative
//! (ties count one half). The ranking harness builds one list per held-out
//! positive: the positive plus `NS` sampled negatives scored under the same
//! user and context, then averages NDCG over all such lists.

use crate::data::{negative_sample, Dataset, Schema};
use crate::error::{Error, Result};
use crate::features::EmbeddingTable;
use crate::numerics::cosine_similarity;
use crate::pretrain::PretrainModel;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// One scored candidate in a ranked list.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub item: u64,
    pub score: f64,
    pub relevance: u8,
}

/// A scored candidate list for one (user, positive) evaluation case, sorted
/// by descending score. Ties break by ascending item id so a ranking is a
/// pure function of its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
    pub tie_break: &'static str,
}

impl RankedList {
    /// Sort scored items into a ranked list. Scores must be finite.
    pub fn from_scored(scored: Vec<(u64, f64, bool)>) -> Result<RankedList> {
        if scored.is_empty() {
            return Err(Error::Metric("cannot rank an empty candidate list".into()));
        }
        if let Some((item, score, _)) = scored.iter().find(|(_, s, _)| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "item {item} has non-finite score {score}"
            )));
        }
        let mut entries: Vec<RankedEntry> = scored
            .into_iter()
            .map(|(item, score, relevant)| RankedEntry {
                item,
                score,
                relevance: u8::from(relevant),
            })
            .collect();
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores validated finite")
                .then(a.item.cmp(&b.item))
        });
        Ok(RankedList {
            entries,
            tie_break: "ascending_item_id",
        })
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }
}

/// NDCG at cutoff `k` for one list: DCG with gain `1/log2(rank+1)` at
/// 1-based ranks, normalized by the ideal DCG. A list with no relevant item
/// scores 0.
pub fn ndcg_at_k(list: &RankedList, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("ndcg cutoff k must be at least 1".into()));
    }
    let relevant = list.entries.iter().filter(|e| e.relevance == 1).count();
    if relevant == 0 {
        return Ok(0.0);
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = list
        .entries
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, e)| e.relevance == 1)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=relevant.min(k)).map(discount).sum();
    // an empty sum is IEEE -0.0; keep the metric's zero unsigned
    Ok(dcg / ideal + 0.0)
}

/// Exact AUC: the fraction of (positive, negative) score pairs where the
/// positive wins, ties counted 0.5. Computed from rank statistics
/// (O(n log n)) rather than by enumerating pairs.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Metric(format!(
            "auc needs both classes, got {} positives and {} negatives",
            positive.len(),
            negative.len()
        )));
    }
    let mut combined: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    if let Some((s, _)) = combined.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Numeric(format!("auc input score {s} is not finite")));
    }
    combined.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores validated finite"));
    // Mann-Whitney rank sum with average ranks over tie groups; the tied
    // half-credit falls out of the averaging.
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < combined.len() {
        let mut j = i;
        while j < combined.len() && combined[j].0 == combined[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        positive_rank_sum += avg_rank * combined[i..j].iter().filter(|(_, p)| *p).count() as f64;
        i = j;
    }
    let np = positive.len() as f64;
    let nn = negative.len() as f64;
    Ok((positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Head-similarity and hidden-state statistics over a sample of inputs.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    /// Mean cosine over all head pairs i < j, averaged over inputs.
    pub mean_cosine: f64,
    /// K x K input-averaged cosine matrix; symmetric, unit diagonal.
    pub pair_cosines: Vec<Vec<f64>>,
    /// Mean over inputs of the per-vector coordinate mean of the extracted
    /// representation.
    pub mean_of_means: f64,
    /// Mean over inputs of the per-vector population variance.
    pub mean_of_variances: f64,
}

/// Pairwise cosine statistics of the per-head vectors plus moment
/// statistics of the extracted representations, over a sample of clean
/// inputs. Needs at least two heads to have pairs to compare.
pub fn head_cosine_stats(model: &PretrainModel, inputs: &[Vec<f64>]) -> Result<AnalysisReport> {
    let k = model.config.heads;
    if k < 2 {
        return Err(Error::Config(format!(
            "head similarity analysis needs heads >= 2, model has {k}"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Metric(
            "head similarity analysis needs at least one input".into(),
        ));
    }
    let mut matrix = vec![vec![0.0f64; k]; k];
    let mut representations = Vec::with_capacity(inputs.len());
    for x in inputs {
        let heads = model.head_activations(x)?;
        #[allow(clippy::needless_range_loop)]
        for i in 0..k {
            for j in (i + 1)..k {
                matrix[i][j] += cosine_similarity(&heads[i], &heads[j])?;
            }
        }
        representations.push(model.extract(x)?.values);
    }
    let n = inputs.len() as f64;
    let mut pair_sum = 0.0;
    #[allow(clippy::needless_range_loop)]
    for i in 0..k {
        matrix[i][i] = 1.0;
        for j in (i + 1)..k {
            matrix[i][j] /= n;
            matrix[j][i] = matrix[i][j];
            pair_sum += matrix[i][j];
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let (mean_of_means, mean_of_variances) = hidden_moments(&representations)?;
    Ok(AnalysisReport {
        mean_cosine: pair_sum / pairs,
        pair_cosines: matrix,
        mean_of_means,
        mean_of_variances,
    })
}

/// Mean of per-vector coordinate means and mean of per-vector population
/// variances. All vectors must share one non-zero length.
pub fn hidden_moments(vectors: &[Vec<f64>]) -> Result<(f64, f64)> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Metric("moment statistics need at least one vector".into()))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::Dimension("moment statistics need non-empty vectors".into()));
    }
    let mut mean_sum = 0.0;
    let mut var_sum = 0.0;
    for v in vectors {
        if v.len() != d {
            return Err(Error::Dimension(format!(
                "vector of length {} in a batch of length-{d} vectors",
                v.len()
            )));
        }
        let mean = v.iter().sum::<f64>() / d as f64;
        var_sum += v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        mean_sum += mean;
    }
    let n = vectors.len() as f64;
    Ok((mean_sum / n, var_sum / n))
}

/// Outcome of one leave-one-feature-out run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub feature: String,
    pub auc_full: f64,
    pub auc_ablated: f64,
    /// `auc_full - auc_ablated`; large positive means the feature carried
    /// real signal.
    pub delta_auc: f64,
}

/// Leave-one-feature-out importance: run the full training recipe twice
/// with the same seeds, once with every feature and once with `feature`
/// excluded, and report the AUC drop. The recipe receives the exclusion set
/// and returns the resulting test AUC.
pub fn feature_ablation<F>(schema: &Schema, feature: &str, mut recipe: F) -> Result<AblationReport>
where
    F: FnMut(&BTreeSet<String>) -> Result<f64>,
{
    let known = schema.feature_names();
    if !known.iter().any(|n| n == feature) {
        return Err(Error::Config(format!(
            "feature {feature} is not in the schema (known: {})",
            known.join(", ")
        )));
    }
    let auc_full = recipe(&BTreeSet::new())?;
    let auc_ablated = recipe(&BTreeSet::from([feature.to_string()]))?;
    Ok(AblationReport {
        feature: feature.to_string(),
        auc_full,
        auc_ablated,
        delta_auc: auc_full - auc_ablated,
    })
}

/// Where the reported AUC came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucSource {
    /// Scored test rows with explicit 0/1 labels.
    LabeledRows,
    /// Positives vs. their sampled negatives, pooled over lists.
    SampledLists,
}

/// Test-split ranking quality for one scoring function.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Mean NDCG per requested cutoff, averaged over (user, positive) lists.
    pub ndcg: BTreeMap<usize, f64>,
    pub auc: f64,
    pub auc_source: AucSource,
    /// Number of ranked lists (test positives).
    pub lists: usize,
}

/// Rank every test positive against `negative_samples` sampled negatives
/// scored under the same user and context, and average NDCG over lists.
/// AUC prefers the explicitly labeled test rows when the split has both
/// classes, falling back to the pooled sampled lists otherwise. Sampling is
/// keyed by (seed, test row), so a report is reproducible bit-for-bit.
pub fn evaluate_ranking<S>(
    dataset: &Dataset,
    user_emb: &EmbeddingTable,
    item_emb: &EmbeddingTable,
    scorer: S,
    negative_samples: usize,
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport>
where
    S: Fn(&[f64]) -> Result<f64>,
{
    let empty = BTreeSet::new();
    let mut lists = Vec::new();
    let mut labeled_pos = Vec::new();
    let mut labeled_neg = Vec::new();
    let mut sampled_pos = Vec::new();
    let mut sampled_neg = Vec::new();
    for (row, it) in dataset.test.iter().enumerate() {
        let own = scorer(&dataset.assemble(user_emb, item_emb, it, None)?)?;
        if !it.is_positive() {
            labeled_neg.push(own);
            continue;
        }
        labeled_pos.push(own);
        sampled_pos.push(own);
        let positives = dataset.all_positives.get(&it.user).unwrap_or(&empty);
        let row_seed = seed.wrapping_add((row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut scored = vec![(it.item, own, true)];
        for item in negative_sample(it.user, &dataset.catalog, positives, negative_samples, row_seed)? {
            let s = scorer(&dataset.assemble(user_emb, item_emb, it, Some(item))?)?;
            scored.push((item, s, false));
            sampled_neg.push(s);
        }
        lists.push(RankedList::from_scored(scored)?);
    }
    if lists.is_empty() {
        return Err(Error::Metric(
            "test split holds no positive rows to rank".into(),
        ));
    }
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let total: f64 = lists
            .iter()
            .map(|l| ndcg_at_k(l, k))
            .sum::<Result<f64>>()?;
        ndcg.insert(k, total / lists.len() as f64);
    }
    let (auc_value, auc_source) = if !labeled_neg.is_empty() {
        (auc(&labeled_pos, &labeled_neg)?, AucSource::LabeledRows)
    } else {
        (auc(&sampled_pos, &sampled_neg)?, AucSource::SampledLists)
    };
    Ok(EvalReport {
        ndcg,
        auc: auc_value,
        auc_source,
        lists: lists.len(),
    })
}
