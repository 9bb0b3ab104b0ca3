//! Frozen brute-force dense retriever.
//!
//! Every vector that enters an index is L2-normalized, so similarity is a
//! plain dot product clamped to `[-1, 1]`. Ranking is exact and fully
//! deterministic: items are ordered by descending score, and equal scores
//! are ordered by ascending item id. The rank of an item is
//! `1 + #{items strictly better}` under that same order.

pub mod io;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{param, GrapeError, Result};

/// Unit-norm vector in the shared query/item space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Wrap a vector that is already unit-norm, keeping its exact bits.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(GrapeError::Normalization);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(GrapeError::Normalization);
        }
        Ok(Embedding(v))
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Scale `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GrapeError::Normalization);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(GrapeError::Normalization);
    }
    Ok(Embedding(v.iter().map(|x| x / norm).collect()))
}

/// Cosine similarity of two unit vectors, clamped against rounding drift.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(GrapeError::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(a.as_slice(), b.as_slice()).clamp(-1.0, 1.0))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full ordering of an index for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    /// Item ids by descending score, ties by ascending id.
    pub ordering: Vec<u64>,
    /// `scores[i]` is the score of `ordering[i]`.
    pub scores: Vec<f64>,
}

impl RankedResult {
    /// 1-based rank of `item_id`, if present.
    pub fn rank_of(&self, item_id: u64) -> Option<usize> {
        self.ordering.iter().position(|&id| id == item_id).map(|p| p + 1)
    }
}

/// Immutable set of item embeddings sorted by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    ids: Vec<u64>,
    embeddings: Vec<Embedding>,
    dim: usize,
}

impl CorpusIndex {
    /// Build from already-normalized embeddings. Items are sorted by id.
    pub fn new(mut items: Vec<(u64, Embedding)>) -> Result<Self> {
        if items.is_empty() {
            return Err(param("corpus must contain at least one item"));
        }
        items.sort_by_key(|(id, _)| *id);
        let dim = items[0].1.dim();
        if dim == 0 {
            return Err(param("embedding dimension must be positive"));
        }
        for w in items.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(param(format!("duplicate item id {}", w[0].0)));
            }
        }
        if let Some((_, e)) = items.iter().find(|(_, e)| e.dim() != dim) {
            return Err(GrapeError::Dimension {
                expected: dim,
                got: e.dim(),
            });
        }
        let (ids, embeddings) = items.into_iter().unzip();
        Ok(Self {
            ids,
            embeddings,
            dim,
        })
    }

    /// Build from raw vectors, normalizing each one.
    pub fn from_raw(items: Vec<(u64, Vec<f64>)>) -> Result<Self> {
        let items = items
            .into_iter()
            .map(|(id, v)| l2_normalize(&v).map(|e| (id, e)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Embedding)> {
        self.ids.iter().copied().zip(self.embeddings.iter())
    }

    pub fn contains(&self, item_id: u64) -> bool {
        self.position(item_id).is_some()
    }

    pub fn get(&self, item_id: u64) -> Option<&Embedding> {
        self.position(item_id).map(|p| &self.embeddings[p])
    }

    fn position(&self, item_id: u64) -> Option<usize> {
        self.ids.binary_search(&item_id).ok()
    }

    fn check_dim(&self, q: &Embedding) -> Result<()> {
        if q.dim() != self.dim {
            return Err(GrapeError::Dimension {
                expected: self.dim,
                got: q.dim(),
            });
        }
        Ok(())
    }

    /// Scores of every item, in id order.
    pub fn scores(&self, q: &Embedding) -> Result<Vec<f64>> {
        self.check_dim(q)?;
        Ok(self
            .embeddings
            .iter()
            // `+ 0.0` folds -0.0 into 0.0 so equal scores compare equal
            .map(|e| dot(q.as_slice(), e.as_slice()).clamp(-1.0, 1.0) + 0.0)
            .collect())
    }

    /// Complete deterministic ordering of the corpus for `q`.
    pub fn rank_all(&self, q: &Embedding) -> Result<RankedResult> {
        let scores = self.scores(q)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| better(scores[a], self.ids[a], scores[b], self.ids[b]));
        Ok(RankedResult {
            ordering: order.iter().map(|&i| self.ids[i]).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        })
    }

    /// Rank of `target_id` for query `q`, in `1..=N`.
    pub fn rank_of_target(&self, q: &Embedding, target_id: u64) -> Result<usize> {
        let t = self
            .position(target_id)
            .ok_or(GrapeError::TargetNotFound(target_id))?;
        let scores = self.scores(q)?;
        let st = scores[t];
        let ahead = scores
            .iter()
            .zip(&self.ids)
            .filter(|(&s, &id)| better(s, id, st, target_id) == Ordering::Less)
            .count();
        Ok(1 + ahead)
    }

    /// First `k` item ids of the full ordering.
    pub fn top_k(&self, q: &Embedding, k: usize) -> Result<Vec<u64>> {
        if k == 0 || k > self.len() {
            return Err(param(format!("k = {k} outside 1..={}", self.len())));
        }
        let mut ranked = self.rank_all(q)?;
        ranked.ordering.truncate(k);
        Ok(ranked.ordering)
    }
}

/// `Less` when `(sa, ia)` ranks ahead of `(sb, ib)`.
fn better(sa: f64, ia: u64, sb: f64, ib: u64) -> Ordering {
    sb.total_cmp(&sa).then(ia.cmp(&ib))
}

/// Fraction of runs whose target sits within the first `k` entries.
pub fn recall_at_k(runs: &[(RankedResult, u64)], k: usize) -> Result<f64> {
    if runs.is_empty() {
        return Err(param("recall needs at least one run"));
    }
    if k == 0 {
        return Err(param("k must be at least 1"));
    }
    let hits = runs
        .iter()
        .filter(|(r, t)| r.ordering.iter().take(k).any(|id| id == t))
        .count();
    Ok(hits as f64 / runs.len() as f64)
}

/// Recall at `k` from target ranks directly.
pub fn recall_from_ranks(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(param("recall needs at least one run"));
    }
    if k == 0 {
        return Err(param("k must be at least 1"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}
