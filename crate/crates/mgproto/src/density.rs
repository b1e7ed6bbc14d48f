//! Gaussian-prototype density model.
//!
//! Each class is represented by a mixture of `M` Gaussian components in the
//! `D`-dimensional feature space. All components share the fixed isotropic
//! covariance `COVARIANCE_DIAG * I` with `COVARIANCE_DIAG = 1/(2*pi)`. That
//! choice makes the normalizing constant exactly one for every `D`:
//!
//! ```text
//! (2*pi)^(-D/2) * det(sigma^2 I)^(-1/2) = (2*pi)^(-D/2) * (2*pi)^(D/2) = 1
//! ```
//!
//! so a component density collapses to `exp(-pi * ||f - mean||^2)`, a value in
//! `(0, 1]` that doubles as a bounded similarity score. Class evidence is the
//! prior-weighted sum over components of the spatially max-pooled component
//! density; the class posterior normalizes the evidence across classes under a
//! uniform class prior, and the unnormalized marginal over classes serves as
//! an out-of-distribution score.

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::error::{Error, Result};

/// Shared diagonal covariance entry, `1/(2*pi)`.
///
/// Fixed by construction so that component densities need no normalizing
/// constant; see the module docs.
pub const COVARIANCE_DIAG: f64 = 1.0 / (2.0 * std::f64::consts::PI);

/// Densities below this magnitude are handled through their logarithms to
/// avoid underflow-induced ties.
pub const DENSITY_UNDERFLOW: f64 = 1e-300;

/// A spatial grid of feature vectors, shape `H x W x D`.
///
/// This is the output of the feature extractor for one sample: `H * W`
/// positions, each carrying a `D`-dimensional vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Array3<f64>,
}

impl FeatureGrid {
    /// Wraps an `H x W x D` array, checking that every entry is finite and no
    /// axis is empty.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, d) = values.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::InvalidInput(format!(
                "feature grid axes must be non-empty, got {h}x{w}x{d}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(FeatureGrid { values })
    }

    /// Grid height.
    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    /// Grid width.
    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    /// Number of spatial positions, `H * W`.
    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    /// The feature vector at position `(i, j)`.
    pub fn feature(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![i, j, ..])
    }

    /// The underlying `H x W x D` array.
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }
}

/// Mixture of Gaussian prototypes for one class.
///
/// `means` has shape `M x D`; `priors` has length `M` and is entrywise
/// non-negative. Fitted mixtures have priors summing to one (within `1e-9`);
/// pruning deliberately removes mass without renormalizing, so sums *below*
/// one are legal — sums above one never are.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    class_id: usize,
    means: Array2<f64>,
    priors: Array1<f64>,
}

impl ClassMixture {
    /// Tolerance on the upper prior-sum bound.
    pub const PRIOR_TOLERANCE: f64 = 1e-9;

    /// Builds a mixture, validating shapes, finiteness, and the prior
    /// constraint (positive total mass, at most one).
    pub fn new(class_id: usize, means: Array2<f64>, priors: Array1<f64>) -> Result<Self> {
        let (m, _d) = means.dim();
        if m == 0 {
            return Err(Error::InvalidInput(
                "class mixture needs at least one component".into(),
            ));
        }
        if priors.len() != m {
            return Err(Error::DimensionMismatch {
                context: "mixture priors vs means",
                left: priors.len(),
                right: m,
            });
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("means of class {class_id}")));
        }
        if priors.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "priors of class {class_id} must be finite and non-negative"
            )));
        }
        let total: f64 = priors.sum();
        if total <= 0.0 || total > 1.0 + Self::PRIOR_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "priors of class {class_id} sum to {total}, expected a value in (0, 1]"
            )));
        }
        Ok(ClassMixture {
            class_id,
            means,
            priors,
        })
    }

    /// The class this mixture models.
    pub fn class_id(&self) -> usize {
        self.class_id
    }

    /// Number of mixture components.
    pub fn num_components(&self) -> usize {
        self.means.dim().0
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.means.dim().1
    }

    /// Component means, `M x D`.
    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    /// Component priors, length `M`.
    pub fn priors(&self) -> &Array1<f64> {
        &self.priors
    }

    /// The shared diagonal covariance entry. Constant by design.
    pub fn covariance_diag(&self) -> f64 {
        COVARIANCE_DIAG
    }

    /// Replaces the means in place. Shape must match; values must be finite.
    pub fn set_means(&mut self, means: Array2<f64>) -> Result<()> {
        if means.dim() != self.means.dim() {
            return Err(Error::DimensionMismatch {
                context: "set_means",
                left: means.dim().0 * means.dim().1,
                right: self.means.dim().0 * self.means.dim().1,
            });
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("means of class {}", self.class_id)));
        }
        self.means = means;
        Ok(())
    }

    /// Replaces the priors in place, re-validating the simplex constraint.
    pub fn set_priors(&mut self, priors: Array1<f64>) -> Result<()> {
        let rebuilt = ClassMixture::new(self.class_id, self.means.clone(), priors)?;
        self.priors = rebuilt.priors;
        Ok(())
    }
}

/// Per-component likelihoods over a feature grid, shape `M x H x W`.
#[derive(Debug, Clone)]
pub struct LikelihoodMap {
    values: Array3<f64>,
}

impl LikelihoodMap {
    /// Number of components.
    pub fn num_components(&self) -> usize {
        self.values.dim().0
    }

    /// The `H x W` likelihood slab for component `m`.
    pub fn component(&self, m: usize) -> ndarray::ArrayView2<'_, f64> {
        self.values.index_axis(ndarray::Axis(0), m)
    }

    /// The underlying `M x H x W` array.
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Spatial maximum per component, length `M`.
    pub fn max_per_component(&self) -> Array1<f64> {
        Array1::from_iter((0..self.num_components()).map(|m| {
            self.component(m)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        }))
    }
}

/// The full density head: one [`ClassMixture`] per class, all sharing `M` and
/// `D`. Class priors are uniform and implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHead {
    classes: Vec<ClassMixture>,
}

impl ModelHead {
    /// Builds a head from per-class mixtures.
    ///
    /// Requires at least two classes; `class_id`s must equal positions; every
    /// mixture must share the same `M` and `D`.
    pub fn new(classes: Vec<ClassMixture>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "model head needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let m = classes[0].num_components();
        let d = classes[0].dim();
        for (idx, mix) in classes.iter().enumerate() {
            if mix.class_id() != idx {
                return Err(Error::InvalidInput(format!(
                    "class id {} at position {idx}; ids must be 0..C in order",
                    mix.class_id()
                )));
            }
            if mix.num_components() != m {
                return Err(Error::DimensionMismatch {
                    context: "components per class",
                    left: mix.num_components(),
                    right: m,
                });
            }
            if mix.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "feature dim per class",
                    left: mix.dim(),
                    right: d,
                });
            }
        }
        Ok(ModelHead { classes })
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Components per class.
    pub fn num_components(&self) -> usize {
        self.classes[0].num_components()
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    /// The mixture for class `c`.
    pub fn class(&self, c: usize) -> &ClassMixture {
        &self.classes[c]
    }

    /// Mutable access to the mixture for class `c`.
    pub fn class_mut(&mut self, c: usize) -> &mut ClassMixture {
        &mut self.classes[c]
    }

    /// All mixtures in class order.
    pub fn classes(&self) -> &[ClassMixture] {
        &self.classes
    }

    /// A head with seeded Gaussian means (scaled by `init_scale`) and uniform
    /// priors — the state before any fitting.
    pub fn init_random(
        num_classes: usize,
        num_components: usize,
        dim: usize,
        init_scale: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let mut classes = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let means = Array2::from_shape_fn((num_components, dim), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * init_scale
            });
            let priors = Array1::from_elem(num_components, 1.0 / num_components as f64);
            classes.push(ClassMixture::new(c, means, priors)?);
        }
        ModelHead::new(classes)
    }
}

/// Decision returned by [`classify_or_abstain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Confident prediction of the given class.
    Classify(usize),
    /// Marginal density below threshold (or zero): refuse to predict.
    Abstain,
}

/// Density of a single feature vector under one prototype:
/// `exp(-pi * ||f - mean||^2)`.
///
/// Returns a value in `(0, 1]`, exactly 1 iff `f == mean`.
pub fn gaussian_likelihood(f: ArrayView1<'_, f64>, mean: ArrayView1<'_, f64>) -> Result<f64> {
    Ok(log_gaussian_likelihood(f, mean)?.exp())
}

/// Log-density of a feature vector under one prototype: `-pi * ||f - mean||^2`.
///
/// The log form never underflows and is the variant used wherever densities
/// can drop below [`DENSITY_UNDERFLOW`] (argmax searches, responsibility
/// normalization).
pub fn log_gaussian_likelihood(f: ArrayView1<'_, f64>, mean: ArrayView1<'_, f64>) -> Result<f64> {
    if f.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            context: "gaussian_likelihood",
            left: f.len(),
            right: mean.len(),
        });
    }
    let mut sq = 0.0;
    for (a, b) in f.iter().zip(mean.iter()) {
        let d = a - b;
        sq += d * d;
    }
    if !sq.is_finite() {
        return Err(Error::NonFinite("gaussian_likelihood distance".into()));
    }
    Ok(-std::f64::consts::PI * sq)
}

/// Evaluates every component of `mixture` at every grid position.
///
/// Output shape `M x H x W`; entries lie in `(0, 1]`, and an entry equals 1
/// iff the feature vector equals the component mean.
pub fn likelihood_map(grid: &FeatureGrid, mixture: &ClassMixture) -> Result<LikelihoodMap> {
    if grid.dim() != mixture.dim() {
        return Err(Error::DimensionMismatch {
            context: "likelihood_map feature dim",
            left: grid.dim(),
            right: mixture.dim(),
        });
    }
    let (m, h, w) = (mixture.num_components(), grid.height(), grid.width());
    let mut values = Array3::zeros((m, h, w));
    for k in 0..m {
        let mean = mixture.means().row(k);
        for i in 0..h {
            for j in 0..w {
                values[[k, i, j]] = gaussian_likelihood(grid.feature(i, j), mean)?;
            }
        }
    }
    Ok(LikelihoodMap { values })
}

/// Class-conditional density of a sample: prior-weighted sum over components
/// of the spatially max-pooled component density.
///
/// ```text
/// p(x | c) = sum_m prior_m * max_{i,j} exp(-pi * ||F(i,j) - mean_m||^2)
/// ```
///
/// The result lies in `[0, 1]` because priors form a simplex and each pooled
/// density is at most 1.
pub fn class_conditional(grid: &FeatureGrid, mixture: &ClassMixture) -> Result<f64> {
    let map = likelihood_map(grid, mixture)?;
    let pooled = map.max_per_component();
    Ok(mixture.priors().dot(&pooled))
}

/// Class-conditional densities for every class of the head, in class order.
pub fn class_densities(grid: &FeatureGrid, head: &ModelHead) -> Result<Vec<f64>> {
    head.classes()
        .iter()
        .map(|mix| class_conditional(grid, mix))
        .collect()
}

/// Normalizes class densities into a posterior under a uniform class prior.
///
/// Errors with [`Error::DegeneratePosterior`] when every density is zero —
/// deliberately not a uniform fallback, because an all-zero density vector
/// signals an input far from every prototype, which the abstention path is
/// meant to catch.
pub fn posterior_from_densities(densities: &[f64]) -> Result<Vec<f64>> {
    if densities.is_empty() {
        return Err(Error::InvalidInput("posterior of zero classes".into()));
    }
    if densities.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("class densities".into()));
    }
    let total: f64 = densities.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegeneratePosterior);
    }
    Ok(densities.iter().map(|v| v / total).collect())
}

/// Posterior over classes for one sample; see [`posterior_from_densities`].
pub fn posterior(grid: &FeatureGrid, head: &ModelHead) -> Result<Vec<f64>> {
    posterior_from_densities(&class_densities(grid, head)?)
}

/// Out-of-distribution score: the unnormalized marginal density
/// `sum_c p(x | c)`. Low values flag inputs unlike any class.
pub fn ood_score(grid: &FeatureGrid, head: &ModelHead) -> Result<f64> {
    Ok(class_densities(grid, head)?.iter().sum())
}

/// Index of the maximal density; ties resolve to the lowest class index.
pub fn argmax_density(densities: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in densities.iter().enumerate().skip(1) {
        if v > densities[best] {
            best = c;
        }
    }
    best
}

/// Classifies when the marginal density clears `threshold`, abstains below it.
///
/// A score exactly equal to the threshold classifies; a score of zero abstains
/// regardless of threshold, since an all-zero density vector carries no class
/// evidence.
pub fn classify_or_abstain(grid: &FeatureGrid, head: &ModelHead, threshold: f64) -> Result<Decision> {
    let densities = class_densities(grid, head)?;
    let score: f64 = densities.iter().sum();
    if score < threshold || score <= 0.0 {
        return Ok(Decision::Abstain);
    }
    Ok(Decision::Classify(argmax_density(&densities)))
}
