//! Ranked-likelihood mining losses.
//!
//! The classification logit of a class is its class-conditional density:
//! each prototype contributes its prior times its *best* (rank-1) spatial
//! likelihood. Sub-salient evidence — the second-best patch, the third-best —
//! never reaches that logit, so a model can score well while ignoring most of
//! the object. The mining table generalizes the logit to ranked levels: at
//! level `t`, every prototype contributes its `t`-th best spatial likelihood
//! instead of its best,
//!
//! ```text
//! logit[c][t] = sum_m prior_m^c * rank_t(likelihood map of prototype m)
//! ```
//!
//! Each prototype ranks its own likelihood map independently; ties order by
//! row-major position. The mining loss then runs one cross-entropy race per
//! level `t >= 2`, pitting the true class's level-`t` logit against every
//! other class's level-1 logit — the true class must win even when its best
//! evidence is handicapped away:
//!
//! ```text
//! mining = (1/(T-1)) * sum_{t=2..T} CE([others' level-1, true level-t], y)
//! ```
//!
//! Plain cross-entropy is the same race at `t = 1`. Gradients treat the sort
//! indices as constants — exact almost everywhere, since rank swaps happen on
//! a measure-zero set.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::density::{FeatureGrid, ModelHead};
use crate::error::{Error, Result};

/// Ranked per-class logits with the provenance needed for backprop.
#[derive(Debug, Clone)]
pub struct MiningTable {
    /// `C x T`; `logits[c][t]` is class `c`'s level-`t+1` logit.
    logits: Array2<f64>,
    /// Per class: `M x T` flattened grid positions (`i * W + j`) of each
    /// prototype's rank-`t+1` likelihood. Empty for logit-space-only tables.
    positions: Vec<Array2<usize>>,
    /// Per class: `M x T` ranked likelihood values matching `positions`.
    likelihoods: Vec<Array2<f64>>,
    grid_width: usize,
}

impl MiningTable {
    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.logits.dim().0
    }

    /// Number of levels `T`.
    pub fn levels(&self) -> usize {
        self.logits.dim().1
    }

    /// The `C x T` logit matrix.
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// A table carrying only logits, for loss functions that never reach
    /// back into the feature grid (tests, gradient checks). Using such a
    /// table with [`grad_to_features`] or [`grad_to_means`] is an error.
    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        if logits.dim().0 < 2 || logits.dim().1 == 0 {
            return Err(Error::InvalidInput(
                "mining table needs >= 2 classes and >= 1 level".into(),
            ));
        }
        Ok(MiningTable {
            logits,
            positions: Vec::new(),
            likelihoods: Vec::new(),
            grid_width: 0,
        })
    }

    /// Rank-`t+1` position of prototype `m` of class `c`, as `(i, j)`.
    pub fn position(&self, c: usize, m: usize, t: usize) -> (usize, usize) {
        let flat = self.positions[c][[m, t]];
        (flat / self.grid_width, flat % self.grid_width)
    }
}

/// Builds the ranked logit table for one sample.
///
/// `levels` must lie in `1..=H*W` — there are only `H*W` patches to rank.
/// At `levels = 1`, row `c` of the table reproduces
/// [`crate::density::class_conditional`] exactly.
pub fn build_mining_table(
    grid: &FeatureGrid,
    head: &ModelHead,
    levels: usize,
) -> Result<MiningTable> {
    if levels == 0 {
        return Err(Error::InvalidInput("mining levels must be >= 1".into()));
    }
    if levels > grid.positions() {
        return Err(Error::InvalidInput(format!(
            "mining levels {levels} exceed the {} grid positions",
            grid.positions()
        )));
    }
    if grid.dim() != head.dim() {
        return Err(Error::DimensionMismatch {
            context: "mining table feature dim",
            left: grid.dim(),
            right: head.dim(),
        });
    }
    let (c_total, m_total) = (head.num_classes(), head.num_components());
    let mut logits = Array2::zeros((c_total, levels));
    let mut positions = Vec::with_capacity(c_total);
    let mut likelihoods = Vec::with_capacity(c_total);
    let hw = grid.positions();
    for c in 0..c_total {
        let map = crate::density::likelihood_map(grid, head.class(c))?;
        let mut pos_c = Array2::zeros((m_total, levels));
        let mut lik_c = Array2::zeros((m_total, levels));
        let mut order: Vec<usize> = Vec::with_capacity(hw);
        for m in 0..m_total {
            let slab = map.component(m);
            let flat: Vec<f64> = slab.iter().copied().collect();
            order.clear();
            order.extend(0..hw);
            // Stable sort on descending value keeps row-major order for ties.
            order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).expect("finite likelihoods"));
            let prior = head.class(c).priors()[m];
            for t in 0..levels {
                let p = order[t];
                pos_c[[m, t]] = p;
                lik_c[[m, t]] = flat[p];
                logits[[c, t]] += prior * flat[p];
            }
        }
        positions.push(pos_c);
        likelihoods.push(lik_c);
    }
    Ok(MiningTable {
        logits,
        positions,
        likelihoods,
        grid_width: grid.width(),
    })
}

/// Stable softmax of `v`.
fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Stable `-ln softmax(v)[label]`.
fn cross_entropy(v: &[f64], label: usize) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    lse - v[label]
}

fn check_label(table: &MiningTable, label: usize) -> Result<()> {
    if label >= table.num_classes() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range 0..{}",
            table.num_classes()
        )));
    }
    Ok(())
}

/// One cross-entropy race at a fixed level for the true class.
///
/// The competition vector pits every other class's level-1 logit against the
/// true class's level-`level` logit. Returns the loss and its gradient in
/// table-logit space (a `C x T` array with nonzero entries only in the slots
/// that entered the race).
fn race(table: &MiningTable, label: usize, level: usize) -> (f64, Array2<f64>) {
    let c_total = table.num_classes();
    let mut v = Vec::with_capacity(c_total);
    for c in 0..c_total {
        let t = if c == label { level } else { 0 };
        v.push(table.logits[[c, t]]);
    }
    let loss = cross_entropy(&v, label);
    let probs = softmax(&v);
    let mut dlogits = Array2::zeros(table.logits.dim());
    for c in 0..c_total {
        let grad = probs[c] - if c == label { 1.0 } else { 0.0 };
        let t = if c == label { level } else { 0 };
        dlogits[[c, t]] += grad;
    }
    (loss, dlogits)
}

/// Cross-entropy on the level-1 logits.
///
/// Returns the loss and its gradient with respect to the table logits.
/// With all level-1 logits equal the loss is exactly `ln C`.
pub fn ce_loss(table: &MiningTable, label: usize) -> Result<(f64, Array2<f64>)> {
    check_label(table, label)?;
    Ok(race(table, label, 0))
}

/// The mining loss: mean of the level-`t` races for `t = 2..=T`.
///
/// Requires `T >= 2` — with a single level there is nothing to mine.
pub fn mining_loss(table: &MiningTable, label: usize) -> Result<(f64, Array2<f64>)> {
    check_label(table, label)?;
    let levels = table.levels();
    if levels < 2 {
        return Err(Error::InvalidInput(
            "mining loss needs at least 2 levels".into(),
        ));
    }
    let mut total = 0.0;
    let mut dlogits = Array2::zeros(table.logits.dim());
    let weight = 1.0 / (levels - 1) as f64;
    for level in 1..levels {
        let (loss, grad) = race(table, label, level);
        total += loss;
        dlogits.scaled_add(weight, &grad);
    }
    Ok((total * weight, dlogits))
}

/// Pushes a table-logit gradient back to the feature grid.
///
/// Each logit is `sum_m prior_m * H_m(pos)` with
/// `H = exp(-pi*||f - mean||^2)`, so
/// `dH/df = -2*pi*(f - mean)*H` accumulated at the ranked position. Sort
/// indices are constants of the backward pass.
pub fn grad_to_features(
    table: &MiningTable,
    dlogits: &Array2<f64>,
    grid: &FeatureGrid,
    head: &ModelHead,
) -> Result<Array3<f64>> {
    if table.positions.is_empty() {
        return Err(Error::InvalidInput(
            "logit-only mining table has no feature provenance".into(),
        ));
    }
    if dlogits.dim() != table.logits.dim() {
        return Err(Error::DimensionMismatch {
            context: "mining grad shape",
            left: dlogits.len(),
            right: table.logits.len(),
        });
    }
    let mut dgrid = Array3::zeros(grid.values().dim());
    let two_pi = 2.0 * std::f64::consts::PI;
    for c in 0..table.num_classes() {
        for t in 0..table.levels() {
            let dl = dlogits[[c, t]];
            if dl == 0.0 {
                continue;
            }
            for m in 0..head.num_components() {
                let (i, j) = table.position(c, m, t);
                let h = table.likelihoods[c][[m, t]];
                let w = dl * head.class(c).priors()[m] * h * two_pi;
                let mean = head.class(c).means().row(m);
                let f = grid.feature(i, j);
                for d in 0..grid.dim() {
                    dgrid[[i, j, d]] -= w * (f[d] - mean[d]);
                }
            }
        }
    }
    Ok(dgrid)
}

/// Pushes a table-logit gradient back to the prototype means (used by the
/// point-based training mode, where means learn by descent instead of EM).
///
/// `dH/dmean = +2*pi*(f - mean)*H` — equal and opposite to the feature
/// gradient at the same position.
pub fn grad_to_means(
    table: &MiningTable,
    dlogits: &Array2<f64>,
    grid: &FeatureGrid,
    head: &ModelHead,
) -> Result<Vec<Array2<f64>>> {
    if table.positions.is_empty() {
        return Err(Error::InvalidInput(
            "logit-only mining table has no feature provenance".into(),
        ));
    }
    if dlogits.dim() != table.logits.dim() {
        return Err(Error::DimensionMismatch {
            context: "mining grad shape",
            left: dlogits.len(),
            right: table.logits.len(),
        });
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out: Vec<Array2<f64>> = (0..head.num_classes())
        .map(|_| Array2::zeros((head.num_components(), head.dim())))
        .collect();
    for c in 0..table.num_classes() {
        for t in 0..table.levels() {
            let dl = dlogits[[c, t]];
            if dl == 0.0 {
                continue;
            }
            for m in 0..head.num_components() {
                let (i, j) = table.position(c, m, t);
                let h = table.likelihoods[c][[m, t]];
                let w = dl * head.class(c).priors()[m] * h * two_pi;
                let mean = head.class(c).means().row(m);
                let f = grid.feature(i, j);
                for d in 0..head.dim() {
                    out[c][[m, d]] += w * (f[d] - mean[d]);
                }
            }
        }
    }
    Ok(out)
}

/// The three loss terms of one sample or batch plus their weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mining: f64,
    pub aux: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Tolerance for the total-recomposition invariant.
    pub const TOLERANCE: f64 = 1e-12;

    /// Whether `total` equals `ce + lambda1*mining + lambda2*aux` within
    /// [`Self::TOLERANCE`].
    pub fn is_consistent(&self) -> bool {
        (self.total - (self.ce + self.lambda1 * self.mining + self.lambda2 * self.aux)).abs()
            <= Self::TOLERANCE
    }
}

/// Combines the three loss terms into the training total
/// `ce + lambda1 * mining + lambda2 * aux`.
pub fn total_loss(ce: f64, mining: f64, aux: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        mining,
        aux,
        lambda1,
        lambda2,
        total: ce + lambda1 * mining + lambda2 * aux,
    }
}
