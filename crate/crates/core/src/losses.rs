//! The four contrastive objectives, composed from tape primitives.
//!
//! All four share one similarity kernel (temperature-scaled cosine on
//! pre-normalized embeddings) and one numerically-safe log-sum-exp, and all
//! are built on the tape, so their gradients come from the same verified
//! backward ops. Which embeddings receive gradient is decided entirely by
//! how the caller created them: query-path embeddings are tracked, key and
//! queue embeddings enter as constant leaves.
//!
//! The family, in the notation used throughout (s(u, v) = u.v / tau):
//!
//! - momentum-queue instance discrimination: one positive key, the queue as
//!   negatives: `-log( e^{s(q,k)} / (e^{s(q,k)} + sum_h e^{s(q,h)}) )`.
//! - in-batch instance discrimination over 2n views: positive is the other
//!   view, negatives are the remaining 2n-2 embeddings; mean over all 2n
//!   anchors.
//! - in-batch supervised contrast: positives are all same-class embeddings;
//!   each anchor averages its per-positive terms, then the batch averages
//!   anchors.
//! - supervised momentum-queue contrast: per query, positives are its B_i
//!   in-batch keys plus the same-class queue entries Q_i; the shared
//!   denominator ranges over all B_i keys and the full queue. Unlabeled
//!   queries have B_i = 1 and empty Q_i, which collapses the expression to
//!   the plain momentum-queue loss — semi-supervision is a data property,
//!   not a code path.

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::queue::QueueSnapshot;
use crate::tape::{Tape, TensorId};

/// Similarity hyperparameters. Temperature must be positive (it divides).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityConfig {
    pub temperature: f64,
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::contract(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-batch loss accounting: the scalar that was optimized plus per-query
/// terms and denominator sizes for diagnostics.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_query: Vec<f64>,
    /// Number of similarity terms in each query's denominator.
    pub denominator_terms: Vec<usize>,
}

/// s(u, v) = (u . v) / temperature. Inputs are expected unit-norm (every
/// producer in this crate normalizes); the value is then a scaled cosine.
pub fn scaled_cosine(
    tape: &mut Tape,
    u: TensorId,
    v: TensorId,
    config: &SimilarityConfig,
) -> Result<TensorId> {
    config.validate()?;
    let d = tape.dot(u, v)?;
    Ok(tape.scale(d, 1.0 / config.temperature))
}

/// A queue snapshot materialized on a tape as constant leaves, shared by all
/// queries of a step.
#[derive(Debug, Clone, Default)]
pub struct QueueOnTape {
    pub ids: Vec<TensorId>,
    pub labels: Vec<Option<ClassId>>,
}

impl QueueOnTape {
    /// Inserts every queue embedding as a `requires_grad = false` leaf: the
    /// queue can never receive gradient.
    pub fn insert(tape: &mut Tape, snapshot: &QueueSnapshot) -> Self {
        let ids = snapshot
            .embeddings
            .iter()
            .map(|e| tape.vector_leaf(e, false))
            .collect();
        QueueOnTape {
            ids,
            labels: snapshot.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Momentum-queue instance discrimination for one query: the single `key` is
/// the positive, every queue entry a negative. With an empty queue the loss
/// is exactly zero (the softmax has one term).
pub fn moco_loss(
    tape: &mut Tape,
    query: TensorId,
    key: TensorId,
    queue: &[TensorId],
    config: &SimilarityConfig,
) -> Result<TensorId> {
    let s_key = scaled_cosine(tape, query, key, config)?;
    let mut sims = Vec::with_capacity(1 + queue.len());
    sims.push(s_key);
    for &h in queue {
        sims.push(scaled_cosine(tape, query, h, config)?);
    }
    let all = tape.stack(&sims)?;
    let lse = tape.log_sum_exp(all)?;
    // -log(e^{s_key} / D) = lse - s_key.
    tape.sub(lse, s_key)
}

/// In-batch instance discrimination over 2n views.
///
/// `pair_of[i]` is the index of anchor i's other view; it must be a
/// fixed-point-free involution over the (even, >= 2) embedding count. The
/// result is the mean anchor loss, with per-anchor terms in the breakdown.
pub fn simclr_loss(
    tape: &mut Tape,
    embeddings: &[TensorId],
    pair_of: &[usize],
    config: &SimilarityConfig,
) -> Result<(TensorId, LossBreakdown)> {
    validate_pairing(embeddings.len(), pair_of)?;
    let mut terms = Vec::with_capacity(embeddings.len());
    let mut denominator_terms = Vec::with_capacity(embeddings.len());
    for (i, &anchor) in embeddings.iter().enumerate() {
        let mut sims = Vec::with_capacity(embeddings.len() - 1);
        let mut s_pos = None;
        for (j, &other) in embeddings.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = scaled_cosine(tape, anchor, other, config)?;
            if j == pair_of[i] {
                s_pos = Some(s);
            }
            sims.push(s);
        }
        let s_pos = s_pos.expect("pair_of points at another view");
        let all = tape.stack(&sims)?;
        let lse = tape.log_sum_exp(all)?;
        let term = tape.sub(lse, s_pos)?;
        denominator_terms.push(sims.len());
        terms.push(term);
    }
    let total = tape.mean(&terms)?;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        per_query: terms.iter().map(|&t| tape.scalar_value(t)).collect(),
        denominator_terms,
    };
    Ok((total, breakdown))
}

/// In-batch supervised contrast over 2n views.
///
/// `labels[i]` is anchor i's class as visible to training; `None` marks an
/// unlabeled anchor whose only positive is its own other view (`pair_of`).
/// For labeled anchors the positives are all other same-class embeddings
/// (the own view shares the label, so it is included automatically); every
/// labeled anchor must find at least one. Each anchor averages over its
/// positives; the batch averages over anchors.
pub fn supcon_loss(
    tape: &mut Tape,
    embeddings: &[TensorId],
    labels: &[Option<ClassId>],
    pair_of: &[usize],
    config: &SimilarityConfig,
) -> Result<(TensorId, LossBreakdown)> {
    validate_pairing(embeddings.len(), pair_of)?;
    if labels.len() != embeddings.len() {
        return Err(Error::contract(format!(
            "supcon_loss got {} labels for {} embeddings",
            labels.len(),
            embeddings.len()
        )));
    }
    let mut anchor_terms = Vec::with_capacity(embeddings.len());
    let mut denominator_terms = Vec::with_capacity(embeddings.len());
    for (i, &anchor) in embeddings.iter().enumerate() {
        let mut sims = Vec::with_capacity(embeddings.len() - 1);
        let mut positive_sims = Vec::new();
        for (j, &other) in embeddings.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = scaled_cosine(tape, anchor, other, config)?;
            let is_positive = match labels[i] {
                Some(l) => labels[j] == Some(l),
                None => j == pair_of[i],
            };
            if is_positive {
                positive_sims.push(s);
            }
            sims.push(s);
        }
        if positive_sims.is_empty() {
            // Unreachable for None labels (the pair always exists); labeled
            // anchors can only get here on malformed batch construction.
            return Err(Error::contract(format!(
                "supcon_loss anchor {i} has no positives"
            )));
        }
        let all = tape.stack(&sims)?;
        let lse = tape.log_sum_exp(all)?;
        let mut per_positive = Vec::with_capacity(positive_sims.len());
        for s_pos in positive_sims {
            per_positive.push(tape.sub(lse, s_pos)?);
        }
        let term = tape.mean(&per_positive)?;
        denominator_terms.push(sims.len());
        anchor_terms.push(term);
    }
    let total = tape.mean(&anchor_terms)?;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        per_query: anchor_terms.iter().map(|&t| tape.scalar_value(t)).collect(),
        denominator_terms,
    };
    Ok((total, breakdown))
}

/// One query of the supervised momentum-queue objective.
#[derive(Debug, Clone)]
pub struct SupmocoQuery {
    /// Tracked query embedding.
    pub embedding: TensorId,
    /// Training-visible label; `None` makes the queue all-negative.
    pub label: Option<ClassId>,
    /// Constant key embeddings, self view first; must be non-empty.
    pub keys: Vec<TensorId>,
}

/// Supervised momentum-queue loss for one query:
///
/// ```text
/// L_i = -(1/P_i) [ sum_{j<=B_i} log(e^{s(q,k_j)} / D)
///                + sum_{h in Q_i} log(e^{s(q,h)} / D) ]
/// D   = sum over all B_i keys and ALL queue entries of e^{s(q, .)}
/// ```
///
/// where Q_i are the same-class queue entries (empty for unlabeled queries)
/// and P_i = B_i + |Q_i|. Equivalently: the mean of `lse - s_p` over all
/// positives. Unlabeled queue entries never enter Q_i. Returns the loss node
/// and the denominator term count B_i + K.
pub fn supmoco_loss(
    tape: &mut Tape,
    query: &SupmocoQuery,
    queue: &QueueOnTape,
    config: &SimilarityConfig,
) -> Result<(TensorId, usize)> {
    if query.keys.is_empty() {
        return Err(Error::contract("supmoco_loss requires at least one key (B_i >= 1)"));
    }
    let mut key_sims = Vec::with_capacity(query.keys.len());
    for &k in &query.keys {
        key_sims.push(scaled_cosine(tape, query.embedding, k, config)?);
    }
    let mut queue_sims = Vec::with_capacity(queue.len());
    for &h in &queue.ids {
        queue_sims.push(scaled_cosine(tape, query.embedding, h, config)?);
    }

    // Shared denominator over every key and every queue entry.
    let mut all = key_sims.clone();
    all.extend_from_slice(&queue_sims);
    let stacked = tape.stack(&all)?;
    let lse = tape.log_sum_exp(stacked)?;

    // Positives: all keys, plus same-class queue entries when labeled.
    let mut per_positive = Vec::with_capacity(key_sims.len());
    for s in &key_sims {
        per_positive.push(tape.sub(lse, *s)?);
    }
    if let Some(label) = query.label {
        for (h, s) in queue_sims.iter().enumerate() {
            if queue.labels[h] == Some(label) {
                per_positive.push(tape.sub(lse, *s)?);
            }
        }
    }
    let loss = tape.mean(&per_positive)?;
    Ok((loss, all.len()))
}

/// Batch mean of [`supmoco_loss`] with per-query accounting.
pub fn supmoco_batch_loss(
    tape: &mut Tape,
    queries: &[SupmocoQuery],
    queue: &QueueOnTape,
    config: &SimilarityConfig,
) -> Result<(TensorId, LossBreakdown)> {
    if queries.is_empty() {
        return Err(Error::contract("supmoco_batch_loss requires a non-empty batch"));
    }
    let mut terms = Vec::with_capacity(queries.len());
    let mut denominator_terms = Vec::with_capacity(queries.len());
    for q in queries {
        let (loss, denom) = supmoco_loss(tape, q, queue, config)?;
        terms.push(loss);
        denominator_terms.push(denom);
    }
    let total = tape.mean(&terms)?;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        per_query: terms.iter().map(|&t| tape.scalar_value(t)).collect(),
        denominator_terms,
    };
    Ok((total, breakdown))
}

/// Batch mean of [`moco_loss`]: each query against its first key, labels
/// ignored, the whole queue as negatives.
pub fn moco_batch_loss(
    tape: &mut Tape,
    queries: &[(TensorId, TensorId)],
    queue: &[TensorId],
    config: &SimilarityConfig,
) -> Result<(TensorId, LossBreakdown)> {
    if queries.is_empty() {
        return Err(Error::contract("moco_batch_loss requires a non-empty batch"));
    }
    let mut terms = Vec::with_capacity(queries.len());
    for &(q, k) in queries {
        terms.push(moco_loss(tape, q, k, queue, config)?);
    }
    let total = tape.mean(&terms)?;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        per_query: terms.iter().map(|&t| tape.scalar_value(t)).collect(),
        denominator_terms: vec![1 + queue.len(); queries.len()],
    };
    Ok((total, breakdown))
}

/// Checks `pair_of` is a fixed-point-free involution over an even, non-zero
/// number of embeddings.
fn validate_pairing(n: usize, pair_of: &[usize]) -> Result<()> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::contract(format!(
            "paired losses need an even, non-zero view count, got {n}"
        )));
    }
    if pair_of.len() != n {
        return Err(Error::contract(format!(
            "pair_of has {} entries for {n} embeddings",
            pair_of.len()
        )));
    }
    for (i, &p) in pair_of.iter().enumerate() {
        if p >= n || p == i || pair_of[p] != i {
            return Err(Error::contract(format!(
                "pair_of is not a fixed-point-free involution at index {i}"
            )));
        }
    }
    Ok(())
}

/// The standard pairing for views laid out as [a_1..a_n, b_1..b_n].
pub fn paired_layout(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}
