//! Task-adaptive initialization pool: a bounded ring of post-meta-update
//! parameter snapshots; each iteration starts from the snapshot with the
//! least pre-adaptation support loss on the freshly sampled batch.

use std::collections::VecDeque;

use crate::engine::{batch_support_loss, LossKind};
use crate::models::{MlpSpec, ParamVector};
use crate::taskgen::Episode;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("iteration id {new} not greater than last stored {last}")]
    NonMonotoneIteration { new: u64, last: u64 },
    #[error("selection from an empty pool")]
    Empty,
}

pub struct InitPool {
    snapshots: VecDeque<(u64, ParamVector)>,
    capacity: usize,
}

impl InitPool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "pool capacity must be at least 1");
        InitPool {
            snapshots: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn iteration_ids(&self) -> Vec<u64> {
        self.snapshots.iter().map(|(id, _)| *id).collect()
    }

    pub fn snapshot(&self, idx: usize) -> &ParamVector {
        &self.snapshots[idx].1
    }

    /// Append a snapshot, evicting the oldest when over capacity.
    pub fn store(&mut self, theta: ParamVector, iteration: u64) -> Result<(), PoolError> {
        if let Some(&(last, _)) = self.snapshots.back() {
            if iteration <= last {
                return Err(PoolError::NonMonotoneIteration {
                    new: iteration,
                    last,
                });
            }
        }
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back((iteration, theta));
        Ok(())
    }

    /// Index and snapshot minimizing mean pre-adaptation support loss over
    /// the batch. Smallest index wins ties; snapshots are never mutated.
    pub fn select_best(
        &self,
        episodes: &[Episode],
        spec: &MlpSpec,
        loss_kind: LossKind,
    ) -> Result<(usize, &ParamVector), PoolError> {
        if self.snapshots.is_empty() {
            return Err(PoolError::Empty);
        }
        let mut best = 0usize;
        let mut best_loss = f64::INFINITY;
        for (i, (_, theta)) in self.snapshots.iter().enumerate() {
            let loss = batch_support_loss(spec, theta, episodes, loss_kind);
            if loss < best_loss {
                best_loss = loss;
                best = i;
            }
        }
        Ok((best, &self.snapshots[best].1))
    }
}
