//! Numerical verification of every analytic gradient.
//!
//! Each check draws seeded micro-instances (tiny grids, nets, and heads),
//! computes the analytic gradient, and compares it entry-by-entry against a
//! central finite difference of the corresponding scalar loss. The relative
//! error is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`; a check passes when its
//! worst entry over all instances stays under the check's threshold.
//!
//! The ranked losses are piecewise smooth — the max pool and the mining
//! levels re-sort positions by likelihood — and finite differences are only
//! an oracle inside one smooth piece. Instances are therefore screened for
//! a minimum rank margin before use (see [`MIN_RANK_MARGIN`]); on-margin
//! draws are rejected and redrawn.
//!
//! The composite check rebuilds one full training loss — mean cross-entropy
//! plus weighted mining plus weighted batch auxiliary — through the exact
//! gradient plumbing the training loop uses, so it guards the composition,
//! not just the parts.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::density::{ClassMixture, ModelHead};
use crate::em::{diverse_objective, diverse_objective_grad, e_step};
use crate::error::{Error, Result};
use crate::mining::{build_mining_table, ce_loss, grad_to_features, mining_loss};
use crate::net::{NetGrads, TinyNet};
use crate::proxy::{aux_loss, ProxySet};
use crate::rng::SeedStream;

/// Relative-error bound for the single-loss checks.
pub const LOSS_TOLERANCE: f64 = 1e-5;
/// Relative-error bound for the composite training-loss check.
pub const TOTAL_TOLERANCE: f64 = 1e-4;
/// Central-difference step (scaled by parameter magnitude).
const FD_STEP: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// All check outcomes of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    /// True when every check passed.
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Magnitude floor for the relative-error denominator. A central difference
/// carries roundoff noise of about `eps * |loss| / (2h)` — a few 1e-10 for
/// these losses — so gradient components far below this floor cannot be
/// resolved by finite differences at any correctness; they are compared
/// against the floor instead, which keeps the noise at ~1e-6 relative while
/// still catching any error at the scale of the gradients that matter.
const GRAD_FLOOR: f64 = 1e-4;

/// Relative error between an analytic and a numerical derivative.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Micro-instance dimensions, deliberately tiny so the finite-difference
/// sweep over every parameter stays fast.
const GRID_H: usize = 3;
const GRID_W: usize = 3;
const RAW_DIM: usize = 5;
const OUT_DIM: usize = 4;
const CLASSES: usize = 2;
const COMPONENTS: usize = 2;
const LEVELS: usize = 4;
const BATCH: usize = 2;

struct MicroInstance {
    raws: Vec<Array3<f64>>,
    labels: Vec<usize>,
    net: TinyNet,
    head: ModelHead,
    proxies: ProxySet,
}

/// Smallest relative gap between consecutively ranked position likelihoods
/// that an instance may have. The ranked losses are piecewise smooth: a
/// central difference is only a valid oracle while no two ranked positions
/// swap order inside the perturbation's reach, so instances whose mining
/// ranks are decided by less than this margin are redrawn. The margin is a
/// couple of orders above the likelihood change a `FD_STEP`-sized parameter
/// nudge can cause on these micro-instances.
const MIN_RANK_MARGIN: f64 = 1e-3;
/// Likelihoods at or below this are effectively zero: they stay zero under
/// finite-difference perturbations and cannot cause a rank swap.
const RANK_FLOOR: f64 = 1e-30;
/// Redraw budget before giving up on a rank-separated instance.
const DRAW_ATTEMPTS: usize = 200;

/// Smallest relative rank gap the instance's mining tables depend on.
fn rank_margin(inst: &MicroInstance) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for raw in &inst.raws {
        let (grid, _) = inst.net.forward(raw)?;
        for mixture in inst.head.classes() {
            for m in 0..mixture.num_components() {
                let mut liks = Vec::with_capacity(GRID_H * GRID_W);
                for i in 0..GRID_H {
                    for j in 0..GRID_W {
                        liks.push(crate::density::gaussian_likelihood(
                            grid.feature(i, j),
                            mixture.means().row(m),
                        )?);
                    }
                }
                liks.sort_by(|a, b| b.partial_cmp(a).expect("finite likelihoods"));
                // Only swaps among the first LEVELS+1 ranks can change a
                // table logit.
                for t in 0..LEVELS.min(liks.len() - 1) {
                    if liks[t] <= RANK_FLOOR {
                        break;
                    }
                    margin = margin.min((liks[t] - liks[t + 1]) / liks[t]);
                }
            }
        }
    }
    Ok(margin)
}

fn draw_instance(rng: &mut impl Rng) -> Result<MicroInstance> {
    for _ in 0..DRAW_ATTEMPTS {
        let mut raws = Vec::with_capacity(BATCH);
        let mut labels = Vec::with_capacity(BATCH);
        for b in 0..BATCH {
            let raw = Array3::from_shape_fn((GRID_H, GRID_W, RAW_DIM), |_| {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * z
            });
            raws.push(raw);
            labels.push(b % CLASSES);
        }
        let net = TinyNet::init(RAW_DIM, OUT_DIM, 0.05, rng)?;
        let mut classes = Vec::with_capacity(CLASSES);
        for c in 0..CLASSES {
            let means = Array2::from_shape_fn((COMPONENTS, OUT_DIM), |_| {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * z
            });
            let mut priors = Array1::from_shape_fn(COMPONENTS, |_| rng.random_range(0.5..1.5));
            let total = priors.sum();
            priors.mapv_inplace(|v| v / total);
            classes.push(ClassMixture::new(c, means, priors)?);
        }
        let head = ModelHead::new(classes)?;
        let proxies = ProxySet::init_random(CLASSES, RAW_DIM, 0.1, 6.0, rng)?;
        let inst = MicroInstance {
            raws,
            labels,
            net,
            head,
            proxies,
        };
        if rank_margin(&inst)? > MIN_RANK_MARGIN {
            return Ok(inst);
        }
    }
    Err(Error::Verification(format!(
        "no rank-separated micro-instance in {DRAW_ATTEMPTS} draws"
    )))
}

/// Sweeps every net parameter with a central difference of `loss` and
/// returns the worst relative error against `analytic`.
fn sweep_net_params<F>(inst: &MicroInstance, analytic: &NetGrads, loss: F) -> Result<f64>
where
    F: Fn(&TinyNet) -> Result<f64>,
{
    let params: Vec<f64> = inst.net.params_iter().collect();
    let grads: Vec<f64> = analytic.params_iter().collect();
    let mut worst = 0.0f64;
    for (k, (&p, &a)) in params.iter().zip(grads.iter()).enumerate() {
        let h = FD_STEP * p.abs().max(1.0);
        let mut plus = params.clone();
        plus[k] = p + h;
        let mut minus = params.clone();
        minus[k] = p - h;
        let lp = loss(&TinyNet::from_params(RAW_DIM, OUT_DIM, &plus)?)?;
        let lm = loss(&TinyNet::from_params(RAW_DIM, OUT_DIM, &minus)?)?;
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(a, numeric));
    }
    Ok(worst)
}

/// Analytic net gradient of the batch-mean cross-entropy (plus optional
/// mining and auxiliary terms), mirroring the training loop exactly.
fn composite_grad(
    inst: &MicroInstance,
    net: &TinyNet,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, NetGrads)> {
    let inv_b = 1.0 / BATCH as f64;
    let mut grads = NetGrads::zeros(net);
    let mut emb = Array2::zeros((BATCH, RAW_DIM));
    let mut caches = Vec::with_capacity(BATCH);
    let mut loss = 0.0;
    let mut d_feature_terms = Vec::with_capacity(BATCH);
    for (b, raw) in inst.raws.iter().enumerate() {
        let (grid, cache) = net.forward(raw)?;
        let table = build_mining_table(&grid, &inst.head, LEVELS)?;
        let (ce, d_ce) = ce_loss(&table, inst.labels[b])?;
        let (mn, d_mn) = mining_loss(&table, inst.labels[b])?;
        loss += inv_b * (ce + lambda1 * mn);
        let mut d_logits = d_ce;
        d_logits.scaled_add(lambda1, &d_mn);
        let d_features = grad_to_features(&table, &d_logits, &grid, &inst.head)?;
        d_feature_terms.push(d_features.mapv(|v| v * inv_b));
        emb.row_mut(b).assign(&cache.embedding());
        caches.push(cache);
    }
    let d_emb = if lambda2 > 0.0 {
        let (aux, d_emb, _) = aux_loss(&emb, &inst.labels, &inst.proxies)?;
        loss += lambda2 * aux;
        Some(d_emb)
    } else {
        None
    };
    for b in 0..BATCH {
        let d_embedding = d_emb.as_ref().map(|de| de.row(b).mapv(|v| v * lambda2));
        let g = net.backward(&caches[b], &d_feature_terms[b], d_embedding.as_ref())?;
        grads.add_scaled(&g, 1.0);
    }
    Ok((loss, grads))
}

/// The same composite loss as a pure scalar function of a candidate net.
fn composite_loss(
    inst: &MicroInstance,
    net: &TinyNet,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let inv_b = 1.0 / BATCH as f64;
    let mut emb = Array2::zeros((BATCH, RAW_DIM));
    let mut loss = 0.0;
    for (b, raw) in inst.raws.iter().enumerate() {
        let (grid, cache) = net.forward(raw)?;
        let table = build_mining_table(&grid, &inst.head, LEVELS)?;
        loss += inv_b * ce_loss(&table, inst.labels[b])?.0;
        if lambda1 > 0.0 {
            loss += inv_b * lambda1 * mining_loss(&table, inst.labels[b])?.0;
        }
        emb.row_mut(b).assign(&cache.embedding());
    }
    if lambda2 > 0.0 {
        loss += lambda2 * aux_loss(&emb, &inst.labels, &inst.proxies)?.0;
    }
    Ok(loss)
}

/// One single-loss check over `instances` seeded draws.
fn run_single_loss_check(
    name: &str,
    seeds: &SeedStream,
    instances: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<CheckResult> {
    let mut max_rel_err = 0.0f64;
    for i in 0..instances {
        let mut rng = seeds.derive_indexed(&format!("gradcheck/{name}"), i as u64);
        let inst = draw_instance(&mut rng)?;
        let (_, analytic) = composite_grad(&inst, &inst.net, lambda1, lambda2)?;
        let err = sweep_net_params(&inst, &analytic, |net| {
            composite_loss(&inst, net, lambda1, lambda2)
        })?;
        max_rel_err = max_rel_err.max(err);
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances,
        max_rel_err,
        threshold: LOSS_TOLERANCE,
        pass: max_rel_err <= LOSS_TOLERANCE,
    })
}

/// Finite-difference check of the diversity-objective ascent gradient with
/// respect to the prototype means (responsibilities held fixed, exactly as
/// in the M-step).
fn run_diversity_check(seeds: &SeedStream, instances: usize) -> Result<CheckResult> {
    const VECTORS: usize = 7;
    let mut max_rel_err = 0.0f64;
    for i in 0..instances {
        let mut rng = seeds.derive_indexed("gradcheck/diversity", i as u64);
        let vectors = Array2::from_shape_fn((VECTORS, OUT_DIM), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.7 * z
        });
        let means = Array2::from_shape_fn((COMPONENTS, OUT_DIM), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.7 * z
        });
        let mut priors = Array1::from_shape_fn(COMPONENTS, |_| rng.random_range(0.5..1.5));
        let total = priors.sum();
        priors.mapv_inplace(|v| v / total);
        let mixture = ClassMixture::new(0, means.clone(), priors.clone())?;
        let resp = e_step(vectors.view(), &mixture, 0.1)?;
        let analytic = diverse_objective_grad(vectors.view(), &resp, &means);
        for k in 0..COMPONENTS {
            for d in 0..OUT_DIM {
                let h = FD_STEP * means[[k, d]].abs().max(1.0);
                let mut plus = means.clone();
                plus[[k, d]] += h;
                let mut minus = means.clone();
                minus[[k, d]] -= h;
                let jp = diverse_objective(vectors.view(), &resp, &priors, &plus);
                let jm = diverse_objective(vectors.view(), &resp, &priors, &minus);
                let numeric = (jp - jm) / (2.0 * h);
                max_rel_err = max_rel_err.max(rel_err(analytic[[k, d]], numeric));
            }
        }
    }
    Ok(CheckResult {
        name: "diversity_objective/means".to_string(),
        instances,
        max_rel_err,
        threshold: LOSS_TOLERANCE,
        pass: max_rel_err <= LOSS_TOLERANCE,
    })
}

/// Runs the full gradient-check suite.
///
/// `instances` is the number of independent random micro-instances per
/// check; each instance sweeps every parameter.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradCheckReport> {
    if instances == 0 {
        return Err(Error::InvalidInput(
            "gradcheck needs at least one instance".into(),
        ));
    }
    let seeds = SeedStream::new(seed);
    let mut checks = Vec::new();
    checks.push(run_single_loss_check("ce/net", &seeds, instances, 0.0, 0.0)?);
    checks.push(run_single_loss_check(
        "ce+mining/net",
        &seeds,
        instances,
        0.2,
        0.0,
    )?);
    checks.push(run_single_loss_check(
        "aux/net",
        &seeds,
        instances,
        0.0,
        0.5,
    )?);
    checks.push(run_diversity_check(&seeds, instances)?);
    // The composite check mirrors one full training step's loss and gets the
    // looser end-to-end tolerance.
    let mut total = run_single_loss_check("total/net", &seeds, instances, 0.2, 0.5)?;
    total.threshold = TOTAL_TOLERANCE;
    total.pass = total.max_rel_err <= TOTAL_TOLERANCE;
    checks.push(total);
    Ok(GradCheckReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_default_seed() {
        let report = run_gradcheck(7, 4).unwrap();
        assert_eq!(report.checks.len(), 5);
        for check in &report.checks {
            assert!(
                check.pass,
                "{} failed: max rel err {} > {}",
                check.name, check.max_rel_err, check.threshold
            );
        }
    }

    #[test]
    fn report_is_deterministic() {
        let a = run_gradcheck(3, 2).unwrap();
        let b = run_gradcheck(3, 2).unwrap();
        for (ca, cb) in a.checks.iter().zip(b.checks.iter()) {
            assert_eq!(ca.max_rel_err.to_bits(), cb.max_rel_err.to_bits());
        }
    }

    #[test]
    fn zero_instances_is_an_error() {
        assert!(run_gradcheck(1, 0).is_err());
    }

    #[test]
    fn rel_err_guards_tiny_denominators() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-3);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
