//! Run configuration files.
//!
//! ```toml
//! [data]
//! step_mv = 10
//!
//! [train]
//! architecture = "kan1"
//! target = "Q_S"
//! seed = 0
//! epochs = 1500
//!
//! [symbolic]
//! k = 3
//! ```
//!
//! Every `[train]` key except `architecture` and `target` is optional and
//! falls back to the per-family defaults of [`TrainConfig::new`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::Target;
use crate::evaluate::DEFAULT_SWEEP_VD;
use crate::training::{Architecture, LbfgsSettings, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_step")]
    pub step_mv: u32,
    /// Dataset file; the surrogate is sampled afresh when absent.
    #[serde(default)]
    pub path: Option<String>,
}

fn default_step() -> u32 {
    10
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            step_mv: default_step(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub architecture: Architecture,
    pub target: Target,
    #[serde(default)]
    pub seed: u64,
    /// Use the long budgets (60k epochs for Fourier KANs, lr-driven stop
    /// for MLPs) instead of the desk defaults.
    #[serde(default)]
    pub full_budget: bool,
    pub epochs: Option<usize>,
    pub loss_weight: Option<f64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub plateau_window: Option<usize>,
    pub plateau_threshold: Option<f64>,
    pub plateau_factor: Option<f64>,
    pub min_lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_interval: Option<usize>,
    pub ladder: Option<Vec<usize>>,
    pub lbfgs_history: Option<usize>,
    pub lbfgs_max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolicSection {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Retraining per round as a share of the training budget.
    #[serde(default = "default_fraction")]
    pub retrain_fraction: f64,
}

fn default_k() -> usize {
    3
}

fn default_fraction() -> f64 {
    crate::symbolic::RETRAIN_FRACTION
}

impl Default for SymbolicSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            retrain_fraction: default_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_sweep_vd")]
    pub sweep_vd: Vec<f64>,
    #[serde(default = "default_resolution")]
    pub resolution_mv: f64,
}

fn default_sweep_vd() -> Vec<f64> {
    DEFAULT_SWEEP_VD.to_vec()
}

fn default_resolution() -> f64 {
    1.0
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sweep_vd: default_sweep_vd(),
            resolution_mv: default_resolution(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub symbolic: SymbolicSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fills unspecified training values with the family defaults and
    /// validates the result.
    pub fn train_config(&self) -> Result<TrainConfig, TrainError> {
        let t = &self.train;
        let mut c = if t.full_budget {
            TrainConfig::full(t.architecture, t.target)
        } else {
            TrainConfig::new(t.architecture, t.target)
        };
        c.step_mv = self.data.step_mv;
        c.seed = t.seed;
        if let Some(v) = t.epochs {
            c.epochs = v;
            c.decay_interval = c.scaled_decay_interval();
        }
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = t.$field.clone() { c.$field = v; } )* };
        }
        set!(
            loss_weight,
            lr,
            weight_decay,
            plateau_window,
            plateau_threshold,
            plateau_factor,
            min_lr,
            decay_factor,
            decay_interval,
            ladder
        );
        let defaults = LbfgsSettings::default();
        c.lbfgs.history = t.lbfgs_history.unwrap_or(defaults.history);
        c.lbfgs.max_iter = t.lbfgs_max_iter.unwrap_or(defaults.max_iter);
        c.validate()?;
        if !(self.symbolic.retrain_fraction >= 0.0 && self.symbolic.retrain_fraction.is_finite()) {
            return Err(TrainError::Config(
                "retrain_fraction must be non-negative".into(),
            ));
        }
        if self.symbolic.k == 0 {
            return Err(TrainError::Config("symbolic k must be at least 1".into()));
        }
        if !(self.eval.resolution_mv > 0.0) {
            return Err(TrainError::Config("resolution_mv must be positive".into()));
        }
        Ok(c)
    }
}
