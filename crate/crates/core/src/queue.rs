//! FIFO feature memory holding embeddings from recent steps.
//!
//! The queue decouples the number of available negatives from the batch
//! size: every step enqueues the batch's key embeddings and evicts the
//! oldest entries once capacity is reached. Entries carry an optional class
//! label so the supervised objective can find same-class positives among
//! them; unlabeled entries are stored like any other but are invisible to
//! positive lookup (they only ever serve as negatives).
//!
//! Entries store fixed-width embeddings, never raw inputs, so memory per
//! entry is independent of the input dimensionality.

use std::collections::VecDeque;

use crate::data::ClassId;
use crate::error::{Error, Result};

/// One queued embedding. `insert_seq` is a monotone counter assigned by the
/// queue at enqueue time; it survives eviction of other entries and is the
/// authoritative recency order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub label: Option<ClassId>,
    pub insert_seq: u64,
}

/// Immutable copy of the queue contents at one instant, oldest first.
/// The loss layer consumes this, so a step sees a consistent queue even
/// though enqueue happens later in the same step.
#[derive(Debug, Clone, Default)]
pub struct QueueSnapshot {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<Option<ClassId>>,
}

impl QueueSnapshot {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Bounded FIFO of labeled embeddings.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
    next_seq: u64,
}

impl FeatureQueue {
    /// Creates an empty queue for `dim`-wide embeddings holding at most
    /// `capacity` entries. Both must be positive.
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("queue capacity must be positive"));
        }
        if dim == 0 {
            return Err(Error::contract("queue embedding dim must be positive"));
        }
        Ok(FeatureQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity + 1),
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries oldest-first (iteration order is eviction order).
    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Appends embeddings in the given order, evicting the oldest entries
    /// whenever the queue exceeds capacity. Rejects wrong-width embeddings
    /// before mutating anything.
    pub fn enqueue(&mut self, new_entries: Vec<(Vec<f64>, Option<ClassId>)>) -> Result<()> {
        for (e, _) in &new_entries {
            if e.len() != self.dim {
                return Err(Error::ShapeMismatch {
                    context: "FeatureQueue::enqueue",
                    expected: format!("embedding dim {}", self.dim),
                    got: format!("{}", e.len()),
                });
            }
        }
        for (embedding, label) in new_entries {
            self.entries.push_back(QueueEntry {
                embedding,
                label,
                insert_seq: self.next_seq,
            });
            self.next_seq += 1;
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Indices (into snapshot/iteration order) of entries whose label equals
    /// `label`. Unlabeled entries never match — they are negatives for every
    /// query. Callers with an unlabeled query skip the lookup entirely; the
    /// typed argument makes passing "unlabeled" unrepresentable.
    pub fn positives_for(&self, label: ClassId) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == Some(label))
            .map(|(i, _)| i)
            .collect()
    }

    /// Copies the current contents, oldest first.
    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            embeddings: self.entries.iter().map(|e| e.embedding.clone()).collect(),
            labels: self.entries.iter().map(|e| e.label).collect(),
        }
    }

    /// Restores a queue from checkpointed parts. `next_seq` must exceed every
    /// entry's `insert_seq`.
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        entries: Vec<QueueEntry>,
        next_seq: u64,
    ) -> Result<Self> {
        let mut q = FeatureQueue::new(capacity, dim)?;
        if entries.len() > capacity {
            return Err(Error::contract(format!(
                "queue restore: {} entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::ShapeMismatch {
                    context: "FeatureQueue::from_parts",
                    expected: format!("embedding dim {dim}"),
                    got: format!("{}", e.embedding.len()),
                });
            }
            if e.insert_seq >= next_seq {
                return Err(Error::contract(
                    "queue restore: insert_seq not below next_seq",
                ));
            }
        }
        q.entries = entries.into();
        q.next_seq = next_seq;
        Ok(q)
    }

    /// The sequence number the next enqueued entry will get.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }
}
