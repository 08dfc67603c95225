//! Embedding tables and assembly of the pre-training input vector.
//!
//! An interaction's input is the concatenation of the user embedding, the
//! item embedding, their element-wise product, and any side features:
//! `x = [e_u, e_i, e_u * e_i, e_side]`.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// What `user` or `item` a table embeds. Purely descriptive, carried into
/// checkpoints so a table can be matched back to its vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    User,
    Item,
}

/// Behavior on an id outside `[0, vocab)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Unknown ids are an error.
    Strict,
    /// Unknown ids map to a dedicated fallback row stored past the vocabulary.
    Fallback,
}

/// Dense embedding table over ids `[0, vocab)`.
///
/// With [`OovPolicy::Fallback`] the table holds one extra row at index
/// `vocab` that every out-of-vocabulary id resolves to.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub kind: EntityKind,
    vocab: usize,
    dim: usize,
    policy: OovPolicy,
    rows: Matrix,
}

impl EmbeddingTable {
    /// Seeded initialization with entries uniform in `[-0.05, 0.05]`. The
    /// fallback row, when present, is initialized to zeros so unseen entities
    /// contribute nothing until the data says otherwise.
    pub fn init<R: Rng>(
        kind: EntityKind,
        vocab: usize,
        dim: usize,
        policy: OovPolicy,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "embedding table needs vocab > 0 and dim > 0, got {vocab}x{dim}"
            )));
        }
        let mut rows = Matrix::uniform(vocab, dim, 0.05, rng);
        if policy == OovPolicy::Fallback {
            let mut with_fallback = Matrix::zeros(vocab + 1, dim);
            with_fallback.values_mut()[..vocab * dim].copy_from_slice(rows.values());
            rows = with_fallback;
        }
        Ok(EmbeddingTable {
            kind,
            vocab,
            dim,
            policy,
            rows,
        })
    }

    /// Rebuild from stored rows (checkpoint load). Row count must match the
    /// policy: `vocab` rows for strict, `vocab + 1` for fallback.
    pub fn from_rows(
        kind: EntityKind,
        vocab: usize,
        policy: OovPolicy,
        rows: Matrix,
    ) -> Result<Self> {
        let expected = match policy {
            OovPolicy::Strict => vocab,
            OovPolicy::Fallback => vocab + 1,
        };
        if rows.rows() != expected {
            return Err(Error::Dimension(format!(
                "embedding table expects {expected} rows, got {}",
                rows.rows()
            )));
        }
        let dim = rows.cols();
        if vocab == 0 || dim == 0 {
            return Err(Error::Config("embedding table needs vocab > 0 and dim > 0".into()));
        }
        Ok(EmbeddingTable {
            kind,
            vocab,
            dim,
            policy,
            rows,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn policy(&self) -> OovPolicy {
        self.policy
    }

    /// All rows including the fallback row when the policy keeps one.
    pub fn rows(&self) -> &Matrix {
        &self.rows
    }
}

/// The embedding row for `id`.
///
/// In-vocabulary ids return their row. Out-of-vocabulary ids return the
/// fallback row under [`OovPolicy::Fallback`] and error under
/// [`OovPolicy::Strict`].
pub fn lookup_embedding(table: &EmbeddingTable, id: usize) -> Result<Vec<f64>> {
    let row = if id < table.vocab {
        id
    } else {
        match table.policy {
            OovPolicy::Fallback => table.vocab,
            OovPolicy::Strict => {
                return Err(Error::UnknownEntity(format!(
                    "{:?} id {} outside vocabulary of {}",
                    table.kind, id, table.vocab
                )))
            }
        }
    };
    let d = table.dim;
    Ok(table.rows.values()[row * d..(row + 1) * d].to_vec())
}

/// One of the four slices of an assembled input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    User,
    Item,
    Interaction,
    Side,
}

/// Offsets and lengths of the four segments inside an [`InputVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub user: (usize, usize),
    pub item: (usize, usize),
    pub interaction: (usize, usize),
    pub side: (usize, usize),
}

impl SegmentLayout {
    pub fn total_len(&self) -> usize {
        self.side.0 + self.side.1
    }

    pub fn range(&self, segment: Segment) -> std::ops::Range<usize> {
        let (off, len) = match segment {
            Segment::User => self.user,
            Segment::Item => self.item,
            Segment::Interaction => self.interaction,
            Segment::Side => self.side,
        };
        off..off + len
    }
}

/// Assembled model input with its segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct InputVector {
    pub values: Vec<f64>,
    pub layout: SegmentLayout,
}

/// Concatenate `[e_u, e_i, e_u * e_i, e_side]`.
///
/// The user and item embeddings must have equal length so the element-wise
/// product is defined; all entries must be finite.
pub fn assemble_input(e_u: &[f64], e_i: &[f64], e_side: &[f64]) -> Result<InputVector> {
    if e_u.len() != e_i.len() {
        return Err(Error::Dimension(format!(
            "user embedding has {} entries, item embedding {}; the element-wise product needs equal lengths",
            e_u.len(),
            e_i.len()
        )));
    }
    for (name, v) in [("user", e_u), ("item", e_i), ("side", e_side)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{name} segment contains a non-finite value")));
        }
    }
    let d = e_u.len();
    let mut values = Vec::with_capacity(3 * d + e_side.len());
    values.extend_from_slice(e_u);
    values.extend_from_slice(e_i);
    values.extend(e_u.iter().zip(e_i).map(|(u, i)| u * i));
    values.extend_from_slice(e_side);
    let layout = SegmentLayout {
        user: (0, d),
        item: (d, d),
        interaction: (2 * d, d),
        side: (3 * d, e_side.len()),
    };
    Ok(InputVector { values, layout })
}
