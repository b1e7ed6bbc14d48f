//! Gaussian-mixture prototype learning.
//!
//! This crate models each class as a mixture of Gaussian prototypes over the
//! spatial feature grid of a small network, fits the mixtures by
//! expectation-maximization over per-class feature memory banks (with an
//! optional diversity term that repels coincident prototypes), trains the
//! network with a sub-salient prototype mining loss on ranked likelihoods,
//! scores out-of-distribution inputs by their marginal density, and supports
//! importance-based prototype pruning.
//!
//! The crate is organized as:
//!
//! - [`density`]: feature grids, class mixtures, likelihoods, posteriors,
//!   OoD scores, abstention.
//! - [`checkpoint`]: versioned binary model format plus a JSON mirror.
//! - [`bank`] / [`em`]: per-class feature memory banks and the EM fitter.
//! - [`mining`] / [`proxy`]: ranked-likelihood mining losses and the
//!   proxy-anchor auxiliary loss.
//! - [`net`] / [`synth`] / [`train`]: the toy feature extractor, synthetic
//!   part-based data, and the end-to-end training loop.
//! - [`metrics`] / [`report`]: accuracy, FPR@95%TPR, AUROC, prototype
//!   diversity, and CSV/SVG report emission.
//! - [`gradcheck`]: finite-difference verification of every hand-derived
//!   gradient.
//! - [`config`] / [`cli`]: experiment configuration and the command-line
//!   front end.
//!
//! All randomness flows from one root seed (see [`rng`]); every artifact the
//! crate writes is byte-deterministic for a fixed seed and thread count, and
//! thread count never changes results.

pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod density;
pub mod em;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mining;
pub mod net;
pub mod parallel;
pub mod proxy;
pub mod report;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
