//! Bounded store of candidate coefficient matrices ranked by importance.
//!
//! The importance factor is a validation loss (`I = L_data + L_sr`), so
//! lower is better. When a push overflows the capacity, the entry with the
//! numerically highest importance — the worst candidate — is evicted, ties
//! going to the oldest entry. The queue therefore always holds the k best
//! matrices seen so far, newest preferred among equals.
//!
//! Three replacement strategies produce the constraint matrix for the next
//! training round: the best entry by importance, a uniform random entry
//! from the queue's seeded generator, or the current candidate unchanged
//! (bypassing the queue entirely).

use crate::sparsereg::SparseCoefficientMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("selection strategy '{0}' requires a nonempty queue")]
    Empty(&'static str),
    #[error("unknown selection strategy '{0}' (expected best, random, or direct)")]
    UnknownStrategy(String),
}

/// How the next constraint matrix is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionStrategy {
    Best,
    Random,
    Direct,
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Best => "best",
            SelectionStrategy::Random => "random",
            SelectionStrategy::Direct => "direct",
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = QueueError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "best" => Ok(SelectionStrategy::Best),
            "random" => Ok(SelectionStrategy::Random),
            "direct" => Ok(SelectionStrategy::Direct),
            other => Err(QueueError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Importance factor: the sum of the data loss and the equation loss on
/// held-out data. Lower is better.
pub fn importance(l_data: f64, l_sr: f64) -> f64 {
    l_data + l_sr
}

#[derive(Clone, Debug)]
pub struct QueueEntry {
    pub matrix: SparseCoefficientMatrix,
    pub importance: f64,
    pub round: usize,
}

/// The bounded candidate store. Single writer; reads may interleave freely
/// between writes.
#[derive(Clone, Debug)]
pub struct BufferQueue {
    entries: Vec<QueueEntry>,
    capacity: usize,
    rng: ChaCha8Rng,
}

impl BufferQueue {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        BufferQueue {
            entries: Vec::with_capacity(capacity + 1),
            capacity,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    /// Append an entry; when over capacity, evict the worst (highest
    /// importance), oldest first among ties.
    pub fn push(&mut self, matrix: SparseCoefficientMatrix, importance: f64, round: usize) {
        assert!(
            importance.is_finite(),
            "importance factor must be finite, got {importance}"
        );
        self.entries.push(QueueEntry {
            matrix,
            importance,
            round,
        });
        if self.entries.len() > self.capacity {
            // First strictly-greater scan keeps the earliest of equal maxima.
            let mut worst = 0;
            for (i, e) in self.entries.iter().enumerate() {
                if e.importance > self.entries[worst].importance {
                    worst = i;
                }
            }
            self.entries.remove(worst);
        }
    }

    /// Produce the constraint matrix for the next round.
    pub fn select(
        &mut self,
        strategy: SelectionStrategy,
        direct_candidate: &SparseCoefficientMatrix,
    ) -> Result<SparseCoefficientMatrix, QueueError> {
        match strategy {
            SelectionStrategy::Direct => Ok(direct_candidate.clone()),
            SelectionStrategy::Best => {
                if self.entries.is_empty() {
                    return Err(QueueError::Empty("best"));
                }
                // Minimal importance; ties resolved to the most recent round.
                let mut best = 0;
                for (i, e) in self.entries.iter().enumerate() {
                    let b = &self.entries[best];
                    if e.importance < b.importance
                        || (e.importance == b.importance && e.round > b.round)
                    {
                        best = i;
                    }
                }
                Ok(self.entries[best].matrix.clone())
            }
            SelectionStrategy::Random => {
                if self.entries.is_empty() {
                    return Err(QueueError::Empty("random"));
                }
                let i = self.rng.random_range(0..self.entries.len());
                Ok(self.entries[i].matrix.clone())
            }
        }
    }

    /// Snapshot as delimited text: round, importance, flattened Λ.
    pub fn snapshot_tsv(&self) -> String {
        let mut out = String::from("round\timportance\tlambda\n");
        for e in &self.entries {
            let lam: Vec<String> = e.matrix.values.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!("{}\t{:e}\t{}\n", e.round, e.importance, lam.join(",")));
        }
        out
    }
}
