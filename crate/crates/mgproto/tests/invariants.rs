//! Property tests for the structural invariants of the density head, the EM
//! updates, the memory bank, pruning, mining tables, and the metrics.

use mgproto::bank::MemoryBank;
use mgproto::density::{
    self, ClassMixture, FeatureGrid, ModelHead, gaussian_likelihood, posterior_from_densities,
};
use mgproto::em::{e_step, prior_update};
use mgproto::metrics::{ScoreSet, auroc, fpr95};
use mgproto::mining::build_mining_table;
use mgproto::train::prune_head;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn finite(range: std::ops::Range<f64>) -> impl Strategy<Value = f64> {
    range.prop_map(|v| v)
}

fn vector(dim: usize) -> impl Strategy<Value = Array1<f64>> {
    proptest::collection::vec(finite(-5.0..5.0), dim).prop_map(Array1::from_vec)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(finite(-5.0..5.0), rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).expect("shape"))
}

fn simplex(len: usize) -> impl Strategy<Value = Array1<f64>> {
    proptest::collection::vec(finite(0.01..1.0), len).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        Array1::from_vec(raw.iter().map(|v| v / total).collect())
    })
}

fn mixture(m: usize, d: usize) -> impl Strategy<Value = ClassMixture> {
    (matrix(m, d), simplex(m))
        .prop_map(|(means, priors)| ClassMixture::new(0, means, priors).expect("valid mixture"))
}

fn head(classes: usize, m: usize, d: usize) -> impl Strategy<Value = ModelHead> {
    proptest::collection::vec((matrix(m, d), simplex(m)), classes).prop_map(|parts| {
        let mixtures = parts
            .into_iter()
            .enumerate()
            .map(|(c, (means, priors))| ClassMixture::new(c, means, priors).expect("valid"))
            .collect();
        ModelHead::new(mixtures).expect("valid head")
    })
}

fn grid(h: usize, w: usize, d: usize) -> impl Strategy<Value = FeatureGrid> {
    proptest::collection::vec(finite(-3.0..3.0), h * w * d).prop_map(move |v| {
        FeatureGrid::new(Array3::from_shape_vec((h, w, d), v).expect("shape")).expect("grid")
    })
}

proptest! {
    /// The posterior over classes is a probability distribution whose argmax
    /// agrees with the argmax of the raw densities.
    #[test]
    fn posterior_is_a_distribution(
        densities in proptest::collection::vec(finite(1e-12..1e3), 2..6),
    ) {
        let post = posterior_from_densities(&densities).expect("posterior");
        let sum: f64 = post.iter().sum();
        prop_assert!((sum - 1.0).abs() <= TOL, "sum {sum}");
        prop_assert!(post.iter().all(|p| (0.0..=1.0 + TOL).contains(p)));
        let arg_density = density::argmax_density(&densities);
        let arg_post = density::argmax_density(&post);
        prop_assert_eq!(arg_density, arg_post);
    }

    /// The per-position likelihood lies in [0, 1] (positive whenever the
    /// exponent is above the IEEE underflow threshold), peaks exactly at the
    /// mean, and depends only on the displacement between feature and mean.
    #[test]
    fn likelihood_bounded_and_translation_invariant(
        (f, mean, shift) in (1usize..8).prop_flat_map(|d| (vector(d), vector(d), vector(d))),
    ) {
        let lik = gaussian_likelihood(f.view(), mean.view()).expect("likelihood");
        prop_assert!((0.0..=1.0).contains(&lik), "likelihood {lik}");
        let dist2: f64 = (&f - &mean).mapv(|v| v * v).sum();
        if std::f64::consts::PI * dist2 < 700.0 {
            prop_assert!(lik > 0.0, "likelihood underflowed early: {lik}");
        }
        let peak = gaussian_likelihood(f.view(), f.view()).expect("self likelihood");
        prop_assert!((peak - 1.0).abs() <= TOL);
        let moved = gaussian_likelihood((&f + &shift).view(), (&mean + &shift).view())
            .expect("shifted likelihood");
        prop_assert!((lik - moved).abs() <= 1e-6 * lik.max(1e-30), "{lik} vs {moved}");
    }

    /// E-step responsibilities are row-normalized for any smoothing strength.
    #[test]
    fn e_step_rows_are_normalized(
        (vectors, mix) in (1usize..4, 2usize..5).prop_flat_map(|(d, m)| {
            (matrix(6, d), mixture(m, d))
        }),
        alpha in prop_oneof![Just(0.0), 0.01f64..0.5],
    ) {
        let resp = e_step(vectors.view(), &mix, alpha).expect("e-step");
        for row in resp.values().rows() {
            let sum: f64 = row.sum();
            prop_assert!((sum - 1.0).abs() <= TOL, "row sum {sum}");
            prop_assert!(row.iter().all(|r| *r >= 0.0));
        }
    }

    /// Prior updates stay on the simplex for any EMA strength.
    #[test]
    fn prior_update_stays_on_simplex(
        (vectors, mix, previous) in (1usize..4, 2usize..5).prop_flat_map(|(d, m)| {
            (matrix(6, d), mixture(m, d), simplex(m))
        }),
        tau in 0.0f64..1.0,
    ) {
        let resp = e_step(vectors.view(), &mix, 0.1).expect("e-step");
        let updated = prior_update(&resp, &previous, tau).expect("prior update");
        let sum: f64 = updated.sum();
        prop_assert!((sum - 1.0).abs() <= TOL, "sum {sum}");
        prop_assert!(updated.iter().all(|p| (0.0..=1.0 + TOL).contains(p)));
    }

    /// The memory bank is a strict FIFO: never over capacity, and after any
    /// push sequence it holds exactly the most recent vectors in order.
    #[test]
    fn bank_is_fifo_with_bounded_capacity(
        capacity in 1usize..8,
        pushes in 0usize..20,
    ) {
        let dim = 2;
        let mut bank = MemoryBank::new(1, capacity, dim).expect("bank");
        for i in 0..pushes {
            bank.push(0, Array1::from_vec(vec![i as f64, -(i as f64)])).expect("push");
            prop_assert!(bank.len(0) <= capacity);
        }
        prop_assert_eq!(bank.len(0), pushes.min(capacity));
        let oldest_kept = pushes.saturating_sub(capacity);
        for (slot, view) in bank.iter(0).enumerate() {
            prop_assert_eq!(view[0], (oldest_kept + slot) as f64);
        }
    }

    /// Pruning keeps exactly the heaviest `keep` priors per class, in their
    /// original slot order and at their original (un-renormalized) values,
    /// so mixture mass never grows.
    #[test]
    fn prune_keeps_heaviest_priors_without_renormalizing(
        (full, keep) in (2usize..4, 2usize..6).prop_flat_map(|(classes, m)| {
            (head(classes, m, 3), 1..=m)
        }),
    ) {
        let pruned = prune_head(&full, keep, false).expect("prune");
        prop_assert_eq!(pruned.num_components(), keep);
        for (before, after) in full.classes().iter().zip(pruned.classes()) {
            let mut order: Vec<usize> = (0..before.num_components()).collect();
            order.sort_by(|&a, &b| {
                before.priors()[b]
                    .partial_cmp(&before.priors()[a])
                    .expect("finite priors")
                    .then(a.cmp(&b))
            });
            let mut kept: Vec<usize> = order[..keep].to_vec();
            kept.sort_unstable();
            for (slot, &src) in kept.iter().enumerate() {
                prop_assert_eq!(after.priors()[slot], before.priors()[src]);
                prop_assert_eq!(after.means().row(slot), before.means().row(src));
            }
            prop_assert!(after.priors().sum() <= before.priors().sum() + TOL);
        }
    }

    /// Mining-table logits are non-increasing across ranking levels: deeper
    /// levels aggregate strictly lower-ranked likelihoods.
    #[test]
    fn mining_logits_decrease_with_level(
        (g, h) in (2usize..4,).prop_flat_map(|(d,)| {
            (grid(3, 3, d), head(2, 3, d))
        }),
        levels in 2usize..6,
    ) {
        let table = build_mining_table(&g, &h, levels).expect("table");
        for c in 0..table.num_classes() {
            for t in 1..table.levels() {
                prop_assert!(
                    table.logits()[[c, t]] <= table.logits()[[c, t - 1]] + TOL,
                    "class {c} level {t} rose"
                );
            }
        }
    }

    /// AUROC is a probability, and swapping the ID and OoD roles complements
    /// it; FPR@95 is a rate in [0, 1].
    #[test]
    fn auroc_complement_and_rate_bounds(
        id in proptest::collection::vec(finite(0.0..10.0), 20..40),
        ood in proptest::collection::vec(finite(0.0..10.0), 20..40),
    ) {
        let forward = auroc(&ScoreSet::new(id.clone(), ood.clone()).expect("scores"))
            .expect("auroc");
        let backward = auroc(&ScoreSet::new(ood.clone(), id.clone()).expect("scores"))
            .expect("auroc");
        prop_assert!((0.0..=1.0).contains(&forward));
        prop_assert!((forward + backward - 1.0).abs() <= TOL, "{forward} + {backward}");
        let rate = fpr95(&ScoreSet::new(id, ood).expect("scores")).expect("fpr95");
        prop_assert!((0.0..=1.0).contains(&rate), "fpr95 {rate}");
    }
}
