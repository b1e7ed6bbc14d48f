//! Evaluation metrics.
//!
//! Conventions, fixed here once:
//!
//! - Scores are densities: **high = in-distribution**.
//! - `fpr95` draws its threshold from the *observed* in-distribution scores:
//!   the largest observed value `t` such that at least 95% of ID scores are
//!   `>= t` (so the true-positive rate is at least 0.95 by construction).
//!   The reported value is the fraction of out-of-distribution scores
//!   `>= t` — OoD samples that would be accepted as in-distribution.
//! - `auroc` is the rank-sum (Mann-Whitney) statistic with ties counted 0.5,
//!   i.e. the probability a random ID score outranks a random OoD score.

use crate::density::ClassMixture;
use crate::error::{Error, Result};

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "accuracy",
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let hits = predictions
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// In-distribution and out-of-distribution score samples for OoD metrics.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    id_scores: Vec<f64>,
    ood_scores: Vec<f64>,
}

impl ScoreSet {
    /// Validates both samples: non-empty and finite.
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if id_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::InvalidInput(
                "score set needs non-empty ID and OoD samples".into(),
            ));
        }
        if id_scores
            .iter()
            .chain(ood_scores.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("score set".into()));
        }
        Ok(ScoreSet {
            id_scores,
            ood_scores,
        })
    }

    /// In-distribution scores.
    pub fn id_scores(&self) -> &[f64] {
        &self.id_scores
    }

    /// Out-of-distribution scores.
    pub fn ood_scores(&self) -> &[f64] {
        &self.ood_scores
    }
}

/// Minimum ID sample size for a meaningful 95% threshold.
pub const FPR95_MIN_ID: usize = 20;

/// The detection threshold used by [`fpr95`]: the largest observed ID score
/// `t` with `#{id >= t} >= ceil(0.95 * n)`.
pub fn fpr95_threshold(scores: &ScoreSet) -> Result<f64> {
    let n = scores.id_scores.len();
    if n < FPR95_MIN_ID {
        return Err(Error::InvalidInput(format!(
            "fpr95 needs at least {FPR95_MIN_ID} ID scores, got {n}"
        )));
    }
    // ceil(0.95n) in integer arithmetic; float rounding must not shift the
    // cutoff when 0.95n is exact.
    let k = (95 * n).div_ceil(100);
    let mut sorted = scores.id_scores.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    Ok(sorted[k - 1])
}

/// False-positive rate at (at least) 95% true-positive rate: the fraction of
/// OoD scores at or above the [`fpr95_threshold`].
pub fn fpr95(scores: &ScoreSet) -> Result<f64> {
    let t = fpr95_threshold(scores)?;
    let fp = scores.ood_scores.iter().filter(|&&s| s >= t).count();
    Ok(fp as f64 / scores.ood_scores.len() as f64)
}

/// Area under the ROC curve by rank-sum, ties counted one half.
///
/// Equivalent to the pairwise definition
/// `mean over (id, ood) pairs of [id > ood] + 0.5 * [id == ood]`.
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    let n_id = scores.id_scores.len();
    let n_ood = scores.ood_scores.len();
    // Combined ascending order with provenance.
    let mut all: Vec<(f64, bool)> = scores
        .id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    // Midranks over tie groups.
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_id += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Average pairwise Euclidean distance between a mixture's prototype means.
///
/// Needs at least two components — a single prototype has no pairs.
pub fn diversity_distance(mixture: &ClassMixture) -> Result<f64> {
    let m = mixture.num_components();
    if m < 2 {
        return Err(Error::InvalidInput(
            "diversity distance needs at least 2 components".into(),
        ));
    }
    let mut total = 0.0;
    for a in 0..m {
        for b in (a + 1)..m {
            let mut sq = 0.0;
            for (x, y) in mixture.means().row(a).iter().zip(mixture.means().row(b).iter()) {
                let diff = x - y;
                sq += diff * diff;
            }
            total += sq.sqrt();
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}
