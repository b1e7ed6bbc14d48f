//! Experiment configuration.
//!
//! One flat JSON object holds every knob of an experiment; unknown keys are
//! rejected (a typo must fail loudly, not silently fall back to a default).
//! Every field can be overridden by an environment variable named
//! `MGPROTO_<FIELD>` (upper-cased field name), parsed with JSON syntax —
//! overrides beat the file, and the `--seed` flag beats both.

use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::synth::SyntheticSpec;

/// All knobs of one experiment, flat and JSON-serializable.
///
/// Defaults are the reference hyperparameters of the method: prototype space
/// of 64 dimensions, 10 prototypes per class, 3 EM loops with smoothing 0.1
/// and prior EMA 0.99, loss weights 0.2 / 0.5, 20 mining levels, proxy
/// margin 0.1 at temperature 32, learning rate 3e-3 on the add-on (1e-4 on
/// the backbone) decayed by 0.4 every 15 epochs, 120 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; all randomness derives from it.
    pub seed: u64,

    // Synthetic data.
    pub num_classes: usize,
    pub parts_per_class: usize,
    pub raw_dim: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub noise_sigma: f64,
    pub ood_shift: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_class: usize,
    /// Magnitude of part 0's center.
    pub part_magnitude: f64,
    /// Parts 1.. get `part_magnitude * weak_part_scale` (set below 1 to make
    /// later parts sub-salient).
    pub weak_part_scale: f64,
    /// Share part 0's center across all classes (salient but useless).
    pub shared_strong_part: bool,

    // Density head.
    pub proto_dim: usize,
    pub num_prototypes: usize,
    pub memory_capacity: usize,
    pub head_init_scale: f64,

    // EM.
    pub em_loops: usize,
    pub smoothing_alpha: f64,
    pub ema_tau: f64,
    pub m_step_lr: f64,
    pub m_step_iters: usize,
    pub diversity_enabled: bool,

    // Training.
    pub epochs: usize,
    /// Epochs before any prototype update: the net trains while the memory
    /// banks fill with every grid-cell feature of each sample; at the first
    /// batch afterwards every class's means are re-seeded from observed
    /// features.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_addon: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mining_levels: usize,
    pub mining_enabled: bool,
    pub aux_enabled: bool,
    pub proxy_delta: f64,
    pub proxy_alpha: f64,
    /// Train prototype means by gradient descent with fixed uniform priors
    /// (no banks, no EM) — the point-prototype baseline.
    pub point_based_mode: bool,

    // Pruning.
    /// Renormalize retained priors after pruning (off by default: the kept
    /// mass is the quantity the OoD score should see).
    pub prune_renormalize: bool,

    // Evaluation.
    /// Abstention threshold on the marginal density; `null` means "derive
    /// from the ID score distribution at evaluation time" (5th percentile).
    pub abstain_threshold: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            num_classes: 3,
            parts_per_class: 2,
            raw_dim: 32,
            grid_height: 14,
            grid_width: 14,
            noise_sigma: 0.1,
            ood_shift: 1.0,
            train_per_class: 50,
            test_per_class: 20,
            ood_per_class: 20,
            part_magnitude: 1.5,
            weak_part_scale: 1.0,
            shared_strong_part: false,
            proto_dim: 64,
            num_prototypes: 10,
            memory_capacity: 400,
            head_init_scale: 0.3,
            em_loops: 3,
            smoothing_alpha: 0.1,
            ema_tau: 0.99,
            m_step_lr: 3e-3,
            m_step_iters: 10,
            diversity_enabled: true,
            epochs: 120,
            warmup_epochs: 1,
            batch_size: 80,
            lr_backbone: 1e-4,
            lr_addon: 3e-3,
            lr_decay_factor: 0.4,
            lr_decay_every: 15,
            lambda1: 0.2,
            lambda2: 0.5,
            mining_levels: 20,
            mining_enabled: true,
            aux_enabled: true,
            proxy_delta: 0.1,
            proxy_alpha: 32.0,
            point_based_mode: false,
            prune_renormalize: false,
            abstain_threshold: None,
        }
    }
}

/// Environment-variable prefix for overrides.
pub const ENV_PREFIX: &str = "MGPROTO_";

impl ExperimentConfig {
    /// Loads a config file, applies `MGPROTO_*` environment overrides, and
    /// validates. Unknown keys in either source are errors.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    /// Builds a config from a JSON value plus environment overrides.
    pub fn from_value(mut value: serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config root must be a JSON object".into()))?;
        for (key, raw) in std::env::vars() {
            let Some(field) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let field = field.to_ascii_lowercase();
            let parsed: serde_json::Value = serde_json::from_str(&raw).map_err(|_| {
                Error::Config(format!(
                    "env override {key}={raw} is not valid JSON (numbers, true/false)"
                ))
            })?;
            obj.insert(field, parsed);
        }
        let config: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-field validation. Delegates to the synthetic-spec and EM
    /// builders so their invariants are checked from a single place.
    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec()?;
        self.em_config().validate()?;
        if self.proto_dim == 0 {
            return Err(Error::Config("proto_dim must be >= 1".into()));
        }
        if self.num_prototypes == 0 {
            return Err(Error::Config("num_prototypes must be >= 1".into()));
        }
        if self.memory_capacity < self.num_prototypes {
            return Err(Error::Config(format!(
                "memory_capacity {} cannot warm up {} prototypes",
                self.memory_capacity, self.num_prototypes
            )));
        }
        if !self.head_init_scale.is_finite() || self.head_init_scale < 0.0 {
            return Err(Error::Config("head_init_scale must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} leaves no training epochs (epochs {})",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_addon", self.lr_addon),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be >= 1".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if self.mining_levels == 0 {
            return Err(Error::Config("mining_levels must be >= 1".into()));
        }
        if self.mining_levels > self.grid_height * self.grid_width {
            return Err(Error::Config(format!(
                "mining_levels {} exceed the {} grid positions",
                self.mining_levels,
                self.grid_height * self.grid_width
            )));
        }
        if self.mining_enabled && self.lambda1 > 0.0 && self.mining_levels < 2 {
            return Err(Error::Config(
                "mining needs mining_levels >= 2 (or disable it)".into(),
            ));
        }
        if !self.proxy_alpha.is_finite() || self.proxy_alpha <= 0.0 {
            return Err(Error::Config("proxy_alpha must be > 0".into()));
        }
        if !self.proxy_delta.is_finite() {
            return Err(Error::Config("proxy_delta must be finite".into()));
        }
        if let Some(t) = self.abstain_threshold {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::Config("abstain_threshold must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// The synthetic-data spec this config describes.
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let mut magnitudes = vec![self.part_magnitude * self.weak_part_scale; self.parts_per_class];
        if !magnitudes.is_empty() {
            magnitudes[0] = self.part_magnitude;
        }
        SyntheticSpec::build(
            self.num_classes,
            self.parts_per_class,
            self.raw_dim,
            self.grid_height,
            self.grid_width,
            self.noise_sigma,
            self.ood_shift,
            self.train_per_class,
            self.test_per_class,
            self.ood_per_class,
            &magnitudes,
            self.shared_strong_part,
        )
    }

    /// The EM knobs of this config.
    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            loops: self.em_loops,
            smoothing_alpha: self.smoothing_alpha,
            ema_tau: self.ema_tau,
            m_step_lr: self.m_step_lr,
            m_step_iters: self.m_step_iters,
            diversity_enabled: self.diversity_enabled,
        }
    }

    /// Learning rate multiplier at a given epoch under the step-decay
    /// schedule: `decay_factor ^ (epoch / decay_every)`.
    pub fn lr_scale_at(&self, epoch: usize) -> f64 {
        self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}
