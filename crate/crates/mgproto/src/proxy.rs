//! Proxy-anchor auxiliary loss on pooled embeddings.
//!
//! One learnable proxy vector per class anchors the batch geometry: pooled
//! embeddings are pulled toward their own class's proxy and pushed from the
//! others, under cosine similarity `s(e, q) = <e, q> / (||e|| * ||q||)`:
//!
//! ```text
//! aux = (1/|Qp|) * sum_{q in Qp} ln(1 + sum_{e in Pq} exp(-alpha*(s(e,q) - delta)))
//!     + (1/|Q|)  * sum_{q in Q}  ln(1 + sum_{e in Nq} exp( alpha*(s(e,q) + delta)))
//! ```
//!
//! where `Q` is all proxies, `Qp` those with at least one same-class
//! embedding in the batch, `Pq`/`Nq` the same-class / other-class embeddings
//! for proxy `q`, `delta` a margin, and `alpha` a temperature. The loss keeps
//! the embedding space discriminative so the feature distribution the
//! mixtures are fit to does not collapse.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One learnable proxy per class, plus the loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxySet {
    /// `C x Dr` proxy matrix.
    proxies: Array2<f64>,
    /// Similarity margin.
    delta: f64,
    /// Temperature (steepness) of both terms.
    alpha: f64,
}

impl ProxySet {
    /// Builds a proxy set, requiring every proxy to have nonzero norm (cosine
    /// similarity is undefined at zero) and positive `alpha`.
    pub fn new(proxies: Array2<f64>, delta: f64, alpha: f64) -> Result<Self> {
        if proxies.dim().0 < 2 {
            return Err(Error::InvalidInput("need at least 2 proxies".into()));
        }
        if proxies.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("proxies".into()));
        }
        for (c, row) in proxies.rows().into_iter().enumerate() {
            if norm(row) == 0.0 {
                return Err(Error::InvalidInput(format!("proxy {c} has zero norm")));
            }
        }
        if !delta.is_finite() || !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::InvalidInput(
                "proxy margin must be finite, temperature positive".into(),
            ));
        }
        Ok(ProxySet {
            proxies,
            delta,
            alpha,
        })
    }

    /// Seeded standard-normal initialization.
    pub fn init_random(
        num_classes: usize,
        dim: usize,
        delta: f64,
        alpha: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let proxies = Array2::from_shape_fn((num_classes, dim), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        ProxySet::new(proxies, delta, alpha)
    }

    /// Number of proxies (classes).
    pub fn num_classes(&self) -> usize {
        self.proxies.dim().0
    }

    /// Embedding dimensionality.
    pub fn dim(&self) -> usize {
        self.proxies.dim().1
    }

    /// The `C x Dr` proxy matrix.
    pub fn proxies(&self) -> &Array2<f64> {
        &self.proxies
    }

    /// The similarity margin.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// The temperature.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Gradient-descent step on the proxies; errors if a proxy would become
    /// non-finite or zero.
    pub fn apply_step(&mut self, grads: &Array2<f64>, lr: f64) -> Result<()> {
        if grads.dim() != self.proxies.dim() {
            return Err(Error::DimensionMismatch {
                context: "proxy step",
                left: grads.len(),
                right: self.proxies.len(),
            });
        }
        self.proxies.scaled_add(-lr, grads);
        if self.proxies.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("proxies after step".into()));
        }
        for (c, row) in self.proxies.rows().into_iter().enumerate() {
            if norm(row) == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "proxy {c} collapsed to zero norm"
                )));
            }
        }
        Ok(())
    }
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grads(
    e: ArrayView1<'_, f64>,
    q: ArrayView1<'_, f64>,
) -> (f64, Array1<f64>, Array1<f64>) {
    let ne = norm(e);
    let nq = norm(q);
    let dot = e.dot(&q);
    let s = dot / (ne * nq);
    // ds/de = q/(||e||*||q||) - s*e/||e||^2, and symmetrically for q.
    let mut de = Array1::zeros(e.len());
    let mut dq = Array1::zeros(q.len());
    for i in 0..e.len() {
        de[i] = q[i] / (ne * nq) - s * e[i] / (ne * ne);
        dq[i] = e[i] / (ne * nq) - s * q[i] / (nq * nq);
    }
    (s, de, dq)
}

/// Evaluates the proxy-anchor loss on a batch of embeddings.
///
/// Returns the loss plus the gradients with respect to the embeddings
/// (`B x Dr`) and the proxies (`C x Dr`). Zero-norm embeddings are an error:
/// cosine similarity is undefined for them.
pub fn aux_loss(
    embeddings: &Array2<f64>,
    labels: &[usize],
    set: &ProxySet,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (b, d) = embeddings.dim();
    if b == 0 {
        return Err(Error::InvalidInput("aux loss over an empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            context: "aux loss labels",
            left: labels.len(),
            right: b,
        });
    }
    if d != set.dim() {
        return Err(Error::DimensionMismatch {
            context: "aux loss embedding dim",
            left: d,
            right: set.dim(),
        });
    }
    let c_total = set.num_classes();
    for (i, &label) in labels.iter().enumerate() {
        if label >= c_total {
            return Err(Error::InvalidInput(format!(
                "label {label} of embedding {i} out of range 0..{c_total}"
            )));
        }
        if norm(embeddings.row(i)) == 0.0 {
            return Err(Error::InvalidInput(format!(
                "embedding {i} has zero norm; cosine similarity undefined"
            )));
        }
    }

    // Similarities and their gradients, computed once.
    let mut sim = Array2::zeros((b, c_total));
    let mut dsim_de = vec![Array1::zeros(d); b * c_total];
    let mut dsim_dq = vec![Array1::zeros(d); b * c_total];
    for i in 0..b {
        for c in 0..c_total {
            let (s, de, dq) = cosine_with_grads(embeddings.row(i), set.proxies().row(c));
            sim[[i, c]] = s;
            dsim_de[i * c_total + c] = de;
            dsim_dq[i * c_total + c] = dq;
        }
    }

    let present: Vec<bool> = (0..c_total)
        .map(|c| labels.iter().any(|&l| l == c))
        .collect();
    let num_present = present.iter().filter(|&&p| p).count();
    let alpha = set.alpha();
    let delta = set.delta();

    let mut loss = 0.0;
    let mut d_emb = Array2::zeros((b, d));
    let mut d_prox = Array2::zeros((c_total, d));

    // Pull term over proxies with positives in the batch.
    for c in 0..c_total {
        if !present[c] {
            continue;
        }
        let mut acc = 0.0;
        for i in 0..b {
            if labels[i] == c {
                acc += (-alpha * (sim[[i, c]] - delta)).exp();
            }
        }
        loss += (1.0 + acc).ln() / num_present as f64;
        let outer = 1.0 / ((1.0 + acc) * num_present as f64);
        for i in 0..b {
            if labels[i] == c {
                let w = outer * (-alpha * (sim[[i, c]] - delta)).exp() * (-alpha);
                d_emb.row_mut(i).scaled_add(w, &dsim_de[i * c_total + c]);
                d_prox.row_mut(c).scaled_add(w, &dsim_dq[i * c_total + c]);
            }
        }
    }

    // Push term over every proxy against other-class embeddings.
    for c in 0..c_total {
        let mut acc = 0.0;
        for i in 0..b {
            if labels[i] != c {
                acc += (alpha * (sim[[i, c]] + delta)).exp();
            }
        }
        loss += (1.0 + acc).ln() / c_total as f64;
        let outer = 1.0 / ((1.0 + acc) * c_total as f64);
        for i in 0..b {
            if labels[i] != c {
                let w = outer * (alpha * (sim[[i, c]] + delta)).exp() * alpha;
                d_emb.row_mut(i).scaled_add(w, &dsim_de[i * c_total + c]);
                d_prox.row_mut(c).scaled_add(w, &dsim_dq[i * c_total + c]);
            }
        }
    }

    Ok((loss, d_emb, d_prox))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn small_set() -> ProxySet {
        ProxySet::new(array![[1.0, 0.0, 0.2], [0.0, 1.0, -0.1]], 0.1, 4.0).unwrap()
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let e = array![0.3, -0.4, 0.5];
        let q = array![1.0, 2.0, -0.5];
        let (s1, _, _) = cosine_with_grads(e.view(), q.view());
        let scaled = e.mapv(|v| v * 7.3);
        let (s2, _, _) = cosine_with_grads(scaled.view(), q.view());
        assert_relative_eq!(s1, s2, epsilon = 1e-12);
    }

    #[test]
    fn aligned_embeddings_score_near_zero() {
        // Embeddings sitting exactly on their proxies, orthogonal classes,
        // high temperature: both terms almost vanish.
        let set = ProxySet::new(array![[1.0, 0.0], [0.0, 1.0]], 0.1, 32.0).unwrap();
        let emb = array![[2.0, 0.0], [0.0, 3.0]];
        let (loss, _, _) = aux_loss(&emb, &[0, 1], &set).unwrap();
        // Pull: ln(1+exp(-32*0.9)) per proxy; push: ln(1+exp(32*0.1)).
        let pull = (1.0 + (-32.0f64 * 0.9).exp()).ln();
        let push = (1.0 + (32.0f64 * 0.1).exp()).ln();
        assert_relative_eq!(loss, pull + push, epsilon = 1e-9);
    }

    #[test]
    fn zero_norm_embedding_is_rejected() {
        let set = small_set();
        let emb = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let err = aux_loss(&emb, &[0, 1], &set).unwrap_err();
        assert!(err.to_string().contains("zero norm"), "{err}");
    }

    #[test]
    fn missing_class_shrinks_pull_normalizer_only() {
        let set = small_set();
        // Batch contains only class 0; proxy 1 still takes part in the push
        // term (normalized by |Q| = 2), but the pull term averages over the
        // single present proxy.
        let emb = array![[0.9, 0.1, 0.0]];
        let (loss, _, _) = aux_loss(&emb, &[0], &set).unwrap();
        assert!(loss.is_finite());
        let (s0, _, _) = cosine_with_grads(emb.row(0), set.proxies().row(0));
        let (s1, _, _) = cosine_with_grads(emb.row(0), set.proxies().row(1));
        let pull = (1.0 + (-4.0 * (s0 - 0.1)).exp()).ln();
        let push = 0.5 * (1.0 + (4.0 * (s1 + 0.1)).exp()).ln();
        // Proxy 0's push set is empty: ln(1+0)/2 contributes nothing.
        assert_relative_eq!(loss, pull + push, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let set = small_set();
        let emb = array![[0.9, 0.1, -0.3], [0.2, 1.1, 0.4], [-0.5, 0.3, 0.8]];
        let labels = [0usize, 1, 0];
        let (_, d_emb, d_prox) = aux_loss(&emb, &labels, &set).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for d in 0..3 {
                let mut plus = emb.clone();
                plus[[i, d]] += h;
                let mut minus = emb.clone();
                minus[[i, d]] -= h;
                let fp = aux_loss(&plus, &labels, &set).unwrap().0;
                let fm = aux_loss(&minus, &labels, &set).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                assert_relative_eq!(d_emb[[i, d]], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
        for c in 0..2 {
            for d in 0..3 {
                let mut plus = set.proxies().clone();
                plus[[c, d]] += h;
                let mut minus = set.proxies().clone();
                minus[[c, d]] -= h;
                let sp = ProxySet::new(plus, set.delta(), set.alpha()).unwrap();
                let sm = ProxySet::new(minus, set.delta(), set.alpha()).unwrap();
                let fd = (aux_loss(&emb, &labels, &sp).unwrap().0
                    - aux_loss(&emb, &labels, &sm).unwrap().0)
                    / (2.0 * h);
                assert_relative_eq!(d_prox[[c, d]], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn proxy_step_moves_against_gradient() {
        let mut set = small_set();
        let before = set.proxies().clone();
        let grads = Array2::from_elem((2, 3), 0.5);
        set.apply_step(&grads, 0.1).unwrap();
        for i in 0..2 {
            for d in 0..3 {
                assert_relative_eq!(
                    set.proxies()[[i, d]],
                    before[[i, d]] - 0.05,
                    epsilon = 1e-15
                );
            }
        }
    }
}
