//! Expectation-maximization over feature memory banks.
//!
//! Each class's mixture is fit to its bank by alternating:
//!
//! 1. **E-step** — posterior responsibility of component `m` for vector `n`,
//!    computed in log space and normalized by log-sum-exp:
//!    `resp[n,m] = prior_m * exp(-pi*||f_n - mean_m||^2) / sum_m'(...)`,
//!    then smoothed toward uniform:
//!    `resp' = (resp + alpha) / (1 + M*alpha)`.
//! 2. **M-step** — either the closed-form weighted average
//!    `mean_m = sum_n resp[n,m] * f_n / sum_n resp[n,m]`, or gradient ascent
//!    on the diversity-regularized objective ([`diverse_objective`]), which
//!    adds a repulsion term `-(1/(M(M-1))) * sum_{m1 != m2}
//!    exp(-||mean_m1 - mean_m2||^2)` that separates coincident prototypes.
//! 3. **Prior update** — responsibility mass per component, blended with the
//!    previous priors by an exponential moving average and renormalized.
//!
//! Smoothing, the EMA, and the diversity term all stabilize fitting against
//! the distribution drift of features during network training; the textbook
//! algorithm is recovered at `alpha = 0`, `ema_tau = 0`, diversity off.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::density::{ClassMixture, ModelHead};
use crate::error::{Error, Result};

/// Knobs for one EM fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmConfig {
    /// Alternations of E-step, M-step, and prior update per fit.
    pub loops: usize,
    /// Responsibility smoothing strength toward uniform.
    pub smoothing_alpha: f64,
    /// EMA factor for priors: `tau * previous + (1 - tau) * new`. Applied to
    /// priors only; means always take their full update.
    pub ema_tau: f64,
    /// Step size for the diversity M-step's gradient ascent.
    pub m_step_lr: f64,
    /// Gradient-ascent iterations per diversity M-step.
    pub m_step_iters: usize,
    /// Whether the M-step maximizes the diversity-regularized objective
    /// (`true`) or uses the closed-form weighted average (`false`).
    pub diversity_enabled: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            loops: 3,
            smoothing_alpha: 0.1,
            ema_tau: 0.99,
            m_step_lr: 3e-3,
            m_step_iters: 10,
            diversity_enabled: true,
        }
    }
}

impl EmConfig {
    /// Validates ranges: `loops >= 1`, `alpha >= 0`, `tau` in `[0, 1)`,
    /// positive step size and iteration count.
    pub fn validate(&self) -> Result<()> {
        if self.loops == 0 {
            return Err(Error::Config("em loops must be >= 1".into()));
        }
        if !self.smoothing_alpha.is_finite() || self.smoothing_alpha < 0.0 {
            return Err(Error::Config("smoothing_alpha must be >= 0".into()));
        }
        if !self.ema_tau.is_finite() || !(0.0..1.0).contains(&self.ema_tau) {
            return Err(Error::Config("ema_tau must lie in [0, 1)".into()));
        }
        if !self.m_step_lr.is_finite() || self.m_step_lr <= 0.0 {
            return Err(Error::Config("m_step_lr must be > 0".into()));
        }
        if self.m_step_iters == 0 {
            return Err(Error::Config("m_step_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Posterior responsibilities, `N x M`; every row sums to one.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    values: Array2<f64>,
}

impl Responsibilities {
    /// The `N x M` responsibility matrix.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Number of vectors.
    pub fn num_vectors(&self) -> usize {
        self.values.dim().0
    }

    /// Number of components.
    pub fn num_components(&self) -> usize {
        self.values.dim().1
    }
}

/// Raw (unsmoothed) responsibilities of `mixture`'s components for each row
/// of `vectors`.
///
/// Computed entirely in log space, so distances that would underflow the
/// density still produce correct normalized responsibilities. In the
/// pathological case where every component has a `-inf` log-weight for some
/// vector, the row falls back to the priors.
pub fn responsibilities_raw(
    vectors: ArrayView2<'_, f64>,
    mixture: &ClassMixture,
) -> Result<Array2<f64>> {
    let (n, d) = vectors.dim();
    if n == 0 {
        return Err(Error::InvalidInput("e_step over an empty bank".into()));
    }
    if d != mixture.dim() {
        return Err(Error::DimensionMismatch {
            context: "e_step feature dim",
            left: d,
            right: mixture.dim(),
        });
    }
    let m = mixture.num_components();
    let mut out = Array2::zeros((n, m));
    let mut log_w = vec![0.0f64; m];
    for i in 0..n {
        let f = vectors.row(i);
        let mut max_lw = f64::NEG_INFINITY;
        for k in 0..m {
            let mean = mixture.means().row(k);
            let mut sq = 0.0;
            for (a, b) in f.iter().zip(mean.iter()) {
                let diff = a - b;
                sq += diff * diff;
            }
            let lw = mixture.priors()[k].ln() - std::f64::consts::PI * sq;
            log_w[k] = lw;
            if lw > max_lw {
                max_lw = lw;
            }
        }
        if !max_lw.is_finite() {
            // No component carries any weight; fall back to the priors.
            out.row_mut(i).assign(mixture.priors());
            continue;
        }
        let mut total = 0.0;
        for k in 0..m {
            let w = (log_w[k] - max_lw).exp();
            out[[i, k]] = w;
            total += w;
        }
        for k in 0..m {
            out[[i, k]] /= total;
        }
    }
    Ok(out)
}

/// E-step: raw responsibilities followed by smoothing toward uniform,
/// `resp' = (resp + alpha) / (1 + M*alpha)`. Rows still sum to one.
pub fn e_step(
    vectors: ArrayView2<'_, f64>,
    mixture: &ClassMixture,
    smoothing_alpha: f64,
) -> Result<Responsibilities> {
    let mut values = responsibilities_raw(vectors, mixture)?;
    if smoothing_alpha > 0.0 {
        let m = mixture.num_components() as f64;
        let denom = 1.0 + m * smoothing_alpha;
        values.mapv_inplace(|v| (v + smoothing_alpha) / denom);
    }
    Ok(Responsibilities { values })
}

/// Responsibility mass below which a component is considered dead and keeps
/// its previous mean. Only truly information-free components qualify.
const DEAD_COMPONENT_MASS: f64 = 1e-300;

/// Closed-form M-step: each mean becomes the responsibility-weighted average
/// of the bank. A component whose responsibility mass vanishes keeps its
/// previous mean instead of collapsing to 0/0.
pub fn m_step_closed_form(
    vectors: ArrayView2<'_, f64>,
    resp: &Responsibilities,
    previous_means: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (n, d) = vectors.dim();
    let m = resp.num_components();
    if resp.num_vectors() != n {
        return Err(Error::DimensionMismatch {
            context: "m_step vectors vs responsibilities",
            left: resp.num_vectors(),
            right: n,
        });
    }
    if previous_means.dim() != (m, d) {
        return Err(Error::DimensionMismatch {
            context: "m_step previous means",
            left: previous_means.len(),
            right: m * d,
        });
    }
    let mut means = Array2::zeros((m, d));
    for k in 0..m {
        let mut mass = 0.0;
        for i in 0..n {
            mass += resp.values()[[i, k]];
        }
        if mass < DEAD_COMPONENT_MASS {
            means.row_mut(k).assign(&previous_means.row(k));
            continue;
        }
        for i in 0..n {
            let w = resp.values()[[i, k]];
            means.row_mut(k).scaled_add(w, &vectors.row(i));
        }
        means.row_mut(k).mapv_inplace(|v| v / mass);
    }
    Ok(means)
}

/// The diversity-regularized M-step objective:
///
/// ```text
/// J = (1/N) sum_n sum_m resp[n,m] * (ln prior_m - pi*||f_n - mean_m||^2)
///   - (1/(M(M-1))) sum_{m1} sum_{m2 != m1} exp(-||mean_m1 - mean_m2||^2)
/// ```
///
/// The first part is the expected complete-data log-likelihood; the second
/// penalizes prototypes for crowding together. With a single component the
/// repulsion term is defined as zero.
pub fn diverse_objective(
    vectors: ArrayView2<'_, f64>,
    resp: &Responsibilities,
    priors: &Array1<f64>,
    means: &Array2<f64>,
) -> f64 {
    let (n, _d) = vectors.dim();
    let m = means.dim().0;
    let mut likelihood = 0.0;
    for i in 0..n {
        let f = vectors.row(i);
        for k in 0..m {
            let w = resp.values()[[i, k]];
            if w == 0.0 {
                continue;
            }
            let mut sq = 0.0;
            for (a, b) in f.iter().zip(means.row(k).iter()) {
                let diff = a - b;
                sq += diff * diff;
            }
            // Clamp the prior inside the log so a zero prior with nonzero
            // responsibility yields a large negative value, not NaN.
            let logp = priors[k].max(f64::MIN_POSITIVE).ln();
            likelihood += w * (logp - std::f64::consts::PI * sq);
        }
    }
    likelihood /= n as f64;
    let mut repulsion = 0.0;
    if m > 1 {
        for k1 in 0..m {
            for k2 in 0..m {
                if k1 == k2 {
                    continue;
                }
                let mut sq = 0.0;
                for (a, b) in means.row(k1).iter().zip(means.row(k2).iter()) {
                    let diff = a - b;
                    sq += diff * diff;
                }
                repulsion += (-sq).exp();
            }
        }
        repulsion /= (m * (m - 1)) as f64;
    }
    likelihood - repulsion
}

/// Ascent gradient of [`diverse_objective`] with respect to the means:
///
/// ```text
/// dJ/dmean_m = (2*pi/N) * sum_n resp[n,m] * (f_n - mean_m)
///            + (4/(M(M-1))) * sum_{m' != m} exp(-||mean_m - mean_m'||^2)
///                                           * (mean_m - mean_m')
/// ```
///
/// (Each unordered pair appears twice in the objective's double sum, hence
/// the factor 4.)
pub fn diverse_objective_grad(
    vectors: ArrayView2<'_, f64>,
    resp: &Responsibilities,
    means: &Array2<f64>,
) -> Array2<f64> {
    let (n, d) = vectors.dim();
    let m = means.dim().0;
    let mut grad = Array2::zeros((m, d));
    let two_pi = 2.0 * std::f64::consts::PI;
    for k in 0..m {
        for i in 0..n {
            let w = resp.values()[[i, k]];
            if w == 0.0 {
                continue;
            }
            let f = vectors.row(i);
            let mean = means.row(k);
            let mut row = grad.row_mut(k);
            for idx in 0..d {
                row[idx] += w * two_pi * (f[idx] - mean[idx]);
            }
        }
        grad.row_mut(k).mapv_inplace(|v| v / n as f64);
    }
    if m > 1 {
        let scale = 4.0 / (m * (m - 1)) as f64;
        for k in 0..m {
            for k2 in 0..m {
                if k == k2 {
                    continue;
                }
                let mut sq = 0.0;
                for (a, b) in means.row(k).iter().zip(means.row(k2).iter()) {
                    let diff = a - b;
                    sq += diff * diff;
                }
                let w = scale * (-sq).exp();
                for idx in 0..d {
                    let diff = means[[k, idx]] - means[[k2, idx]];
                    grad[[k, idx]] += w * diff;
                }
            }
        }
    }
    grad
}

/// Diversity M-step: gradient ascent on [`diverse_objective`] starting from
/// the current means.
///
/// If any step would produce a non-finite mean the whole M-step aborts and
/// the pre-step means are returned unchanged — a blown-up step must never
/// poison the mixture.
pub fn m_step_diverse(
    vectors: ArrayView2<'_, f64>,
    resp: &Responsibilities,
    mixture: &ClassMixture,
    lr: f64,
    iters: usize,
) -> Result<Array2<f64>> {
    if resp.num_vectors() != vectors.dim().0 {
        return Err(Error::DimensionMismatch {
            context: "m_step vectors vs responsibilities",
            left: resp.num_vectors(),
            right: vectors.dim().0,
        });
    }
    let start = mixture.means().clone();
    let mut means = start.clone();
    for _ in 0..iters {
        let grad = diverse_objective_grad(vectors, resp, &means);
        means.scaled_add(lr, &grad);
        if means.iter().any(|v| !v.is_finite()) {
            return Ok(start);
        }
    }
    Ok(means)
}

/// Prior update: responsibility mass per component,
/// `prior_m = (1/N) sum_n resp[n,m]`, blended with the previous priors by
/// `tau * previous + (1 - tau) * new`, then renormalized to sum exactly one.
pub fn prior_update(
    resp: &Responsibilities,
    previous_priors: &Array1<f64>,
    ema_tau: f64,
) -> Result<Array1<f64>> {
    let m = resp.num_components();
    if previous_priors.len() != m {
        return Err(Error::DimensionMismatch {
            context: "prior_update",
            left: previous_priors.len(),
            right: m,
        });
    }
    let n = resp.num_vectors() as f64;
    let mut new = Array1::zeros(m);
    for k in 0..m {
        let mut mass = 0.0;
        for i in 0..resp.num_vectors() {
            mass += resp.values()[[i, k]];
        }
        new[k] = mass / n;
    }
    let mut blended = previous_priors.mapv(|v| v * ema_tau) + new.mapv(|v| v * (1.0 - ema_tau));
    let total = blended.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::NonFinite("prior update total".into()));
    }
    blended.mapv_inplace(|v| v / total);
    Ok(blended)
}

/// Which classes a call to [`em_fit`] actually fitted.
#[derive(Debug, Clone)]
pub struct EmReport {
    /// `fitted[c]` is true when class `c` had at least `M` queued vectors and
    /// went through the configured EM loops.
    pub fitted: Vec<bool>,
}

impl EmReport {
    /// Number of classes fitted in this call.
    pub fn num_fitted(&self) -> usize {
        self.fitted.iter().filter(|&&b| b).count()
    }
}

/// Fits every class mixture to its memory bank with `config.loops`
/// alternations of E-step, M-step, and prior update.
///
/// Classes whose queue holds fewer than `M` vectors are skipped — fitting `M`
/// components to fewer vectors is underdetermined, so early in training a
/// class simply waits until its bank has warmed up. Classes are independent:
/// a skip never affects the others.
pub fn em_fit(bank: &MemoryBank, head: &mut ModelHead, config: &EmConfig) -> Result<EmReport> {
    config.validate()?;
    if bank.num_classes() != head.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "em_fit classes",
            left: bank.num_classes(),
            right: head.num_classes(),
        });
    }
    if bank.dim() != head.dim() {
        return Err(Error::DimensionMismatch {
            context: "em_fit feature dim",
            left: bank.dim(),
            right: head.dim(),
        });
    }
    let mut fitted = vec![false; head.num_classes()];
    for c in 0..head.num_classes() {
        if bank.len(c) < head.num_components() {
            continue;
        }
        let vectors = bank.as_matrix(c);
        for _ in 0..config.loops {
            let mixture = head.class(c);
            let resp = e_step(vectors.view(), mixture, config.smoothing_alpha)?;
            let means = if config.diversity_enabled {
                m_step_diverse(
                    vectors.view(),
                    &resp,
                    mixture,
                    config.m_step_lr,
                    config.m_step_iters,
                )?
            } else {
                m_step_closed_form(vectors.view(), &resp, mixture.means())?
            };
            let priors = prior_update(&resp, mixture.priors(), config.ema_tau)?;
            let mixture = head.class_mut(c);
            mixture.set_means(means)?;
            mixture.set_priors(priors)?;
        }
        fitted[c] = true;
    }
    Ok(EmReport { fitted })
}

/// Farthest-point seeding of `m` mixture means from observed vectors: the
/// first center is a uniform draw, each further center is the vector with
/// the largest squared distance to its nearest already-chosen center.
///
/// Seeding from real vectors is what lets EM discover small, far clusters
/// (a part that occupies one grid cell out of dozens): a far cluster has a
/// huge squared distance to every background center, so the greedy argmax
/// picks it before any second background vector — even a cluster with a
/// single representative is found. Sampling proportional to squared
/// distance would let the sheer count of background vectors outvote a tiny
/// far cluster; random means in feature space would orbit the background
/// mode forever.
pub fn farthest_point_init(
    vectors: ArrayView2<'_, f64>,
    m: usize,
    rng: &mut impl rand::Rng,
) -> Result<Array2<f64>> {
    let (n, d) = vectors.dim();
    if m == 0 {
        return Err(Error::InvalidInput(
            "farthest_point_init needs m >= 1".into(),
        ));
    }
    if n < m {
        return Err(Error::InvalidInput(format!(
            "farthest_point_init needs at least {m} vectors, got {n}"
        )));
    }
    let sqdist = |a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };
    let mut centers = Array2::zeros((m, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&vectors.row(first));
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sqdist(vectors.row(i), centers.row(0)))
        .collect();
    for k in 1..m {
        // First unchosen index attaining the max distance. Non-finite
        // distances are skipped so a corrupt vector never becomes a center;
        // when every remaining vector coincides with a center (all zeros)
        // this still picks a fresh index rather than duplicating one.
        let mut pick = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, &dist) in d2.iter().enumerate() {
            if !chosen[i] && dist.is_finite() && dist > best {
                best = dist;
                pick = i;
            }
        }
        if pick == usize::MAX {
            pick = chosen.iter().position(|&c| !c).expect("n >= m");
        }
        chosen[pick] = true;
        centers.row_mut(k).assign(&vectors.row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sqdist(vectors.row(i), centers.row(k)));
        }
    }
    Ok(centers)
}

/// Mean log-density of the bank under a mixture:
/// `(1/N) sum_n ln sum_m prior_m * exp(-pi*||f_n - mean_m||^2)`,
/// evaluated by log-sum-exp. The quantity EM ascends (without smoothing or
/// diversity).
pub fn bank_log_likelihood(vectors: ArrayView2<'_, f64>, mixture: &ClassMixture) -> Result<f64> {
    let (n, d) = vectors.dim();
    if n == 0 {
        return Err(Error::InvalidInput("log-likelihood of an empty bank".into()));
    }
    if d != mixture.dim() {
        return Err(Error::DimensionMismatch {
            context: "bank_log_likelihood feature dim",
            left: d,
            right: mixture.dim(),
        });
    }
    let m = mixture.num_components();
    let mut total = 0.0;
    let mut log_w = vec![0.0f64; m];
    for i in 0..n {
        let f = vectors.row(i);
        let mut max_lw = f64::NEG_INFINITY;
        for k in 0..m {
            let mut sq = 0.0;
            for (a, b) in f.iter().zip(mixture.means().row(k).iter()) {
                let diff = a - b;
                sq += diff * diff;
            }
            let lw = mixture.priors()[k].ln() - std::f64::consts::PI * sq;
            log_w[k] = lw;
            if lw > max_lw {
                max_lw = lw;
            }
        }
        let sum: f64 = log_w.iter().map(|lw| (lw - max_lw).exp()).sum();
        total += max_lw + sum.ln();
    }
    Ok(total / n as f64)
}
