//! Per-class feature memory banks.
//!
//! Mixture fitting needs more feature vectors than one minibatch provides, so
//! each class keeps a first-in-first-out queue of recent feature vectors. On
//! every training sample, [`bank_update`] enqueues, for each of the class's
//! `M` prototypes, the grid feature most likely under that prototype — `M`
//! vectors per call, duplicates allowed when one feature wins for several
//! prototypes. The queue holds at most `capacity` vectors; older entries are
//! evicted first. The bank is training-time state only and is discarded after
//! fitting.

use ndarray::{Array1, Array2, ArrayView1};
use std::collections::VecDeque;

use crate::density::{log_gaussian_likelihood, ClassMixture, FeatureGrid};
use crate::error::{Error, Result};

/// FIFO queues of feature vectors, one per class.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queues: Vec<VecDeque<Array1<f64>>>,
}

impl MemoryBank {
    /// Creates empty queues for `num_classes` classes, each holding at most
    /// `capacity` vectors of length `dim`.
    pub fn new(num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 || capacity == 0 || dim == 0 {
            return Err(Error::InvalidInput(
                "memory bank needs positive class count, capacity, and dim".into(),
            ));
        }
        Ok(MemoryBank {
            capacity,
            dim,
            queues: (0..num_classes).map(|_| VecDeque::new()).collect(),
        })
    }

    /// Maximum number of vectors a class queue holds.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    /// Current queue length for `class_id`.
    pub fn len(&self, class_id: usize) -> usize {
        self.queues[class_id].len()
    }

    /// Whether the queue for `class_id` is empty.
    pub fn is_empty(&self, class_id: usize) -> bool {
        self.queues[class_id].is_empty()
    }

    /// Enqueues one vector for `class_id`, evicting the oldest entry if the
    /// queue is full.
    pub fn push(&mut self, class_id: usize, vector: Array1<f64>) -> Result<()> {
        if class_id >= self.queues.len() {
            return Err(Error::InvalidInput(format!(
                "class id {class_id} out of range 0..{}",
                self.queues.len()
            )));
        }
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "bank push",
                left: vector.len(),
                right: self.dim,
            });
        }
        let q = &mut self.queues[class_id];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(vector);
        Ok(())
    }

    /// The queue contents for `class_id` as an `N x D` matrix, oldest first.
    pub fn as_matrix(&self, class_id: usize) -> Array2<f64> {
        let q = &self.queues[class_id];
        let mut out = Array2::zeros((q.len(), self.dim));
        for (n, v) in q.iter().enumerate() {
            out.row_mut(n).assign(v);
        }
        out
    }

    /// Iterates the queue for `class_id`, oldest first.
    pub fn iter(&self, class_id: usize) -> impl Iterator<Item = ArrayView1<'_, f64>> {
        self.queues[class_id].iter().map(|v| v.view())
    }
}

/// Enqueues, for each prototype of `mixture`, the feature of `grid` with the
/// highest likelihood under that prototype.
///
/// Exactly `M` vectors are pushed per call, in prototype order; the same
/// feature may be pushed several times when it wins for several prototypes.
/// The argmax is computed on log-likelihoods, so far-away prototypes (whose
/// densities all underflow to zero) still select a well-defined winner; ties
/// resolve to the first position in row-major order.
pub fn bank_update(
    bank: &mut MemoryBank,
    class_id: usize,
    grid: &FeatureGrid,
    mixture: &ClassMixture,
) -> Result<()> {
    if grid.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            context: "bank_update feature dim",
            left: grid.dim(),
            right: bank.dim(),
        });
    }
    for m in 0..mixture.num_components() {
        let mean = mixture.means().row(m);
        let mut best = (0usize, 0usize);
        let mut best_ll = f64::NEG_INFINITY;
        for i in 0..grid.height() {
            for j in 0..grid.width() {
                let ll = log_gaussian_likelihood(grid.feature(i, j), mean)?;
                if ll > best_ll {
                    best_ll = ll;
                    best = (i, j);
                }
            }
        }
        bank.push(class_id, grid.feature(best.0, best.1).to_owned())?;
    }
    Ok(())
}

/// Writes the full bank as CSV: `class_id,slot_index` then one column per
/// feature dimension, rows ordered by class then slot (oldest first).
pub fn export_csv(bank: &MemoryBank, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: String = (0..bank.dim())
        .map(|d| format!(",f{d}"))
        .collect();
    writeln!(out, "class_id,slot_index{header}")?;
    for c in 0..bank.num_classes() {
        for (slot, v) in bank.iter(c).enumerate() {
            let row: String = v.iter().map(|x| format!(",{x}")).collect();
            writeln!(out, "{c},{slot}{row}")?;
        }
    }
    out.flush()?;
    Ok(())
}
