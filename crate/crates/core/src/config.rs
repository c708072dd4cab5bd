//! Experiment configuration, stored as sectioned TOML.
//!
//! ```toml
//! seed = 7
//!
//! [target]
//! weights = [0.5, 0.5]
//! means = [[-1.0], [1.0]]
//! variances = [[0.04], [0.04]]
//!
//! [schedule]
//! kind = "power"
//! levels = 8
//! sigma_min = 0.05
//! sigma_max = 10.0
//!
//! [strategy]
//! kind = "gamma"
//! gammas = [0.0, 0.1, 0.2, 0.3]
//!
//! [mdp]
//! horizon = 8
//!
//! [objective]
//! divergence = "kl"
//! ```
//!
//! Every other section has defaults. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::mdp::{SamplingEnv, Strategy};
use crate::policy::PolicySpec;
use crate::ratio::{DEFAULT_RATIO_MAX, DEFAULT_RATIO_MIN};
use crate::sampler::{NoiseSchedule, ScheduleSpec};
use crate::target::{GaussianMixture, MixtureSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Write measured wall-clock time into the metrics log instead of zeros.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Expert distribution the policy is trained to match.
    pub target: MixtureSpec,
    /// Distribution behind the frozen denoiser; defaults to `target`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<MixtureSpec>,
    pub schedule: ScheduleSpec,
    pub strategy: StrategyConfig,
    pub mdp: MdpConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategyConfig {
    Gamma { gammas: Vec<f64> },
    Guidance { omegas: Vec<f64> },
    Renoise { max_jump: usize },
}

impl StrategyConfig {
    pub fn to_strategy(&self) -> Strategy {
        match self {
            StrategyConfig::Gamma { gammas } => Strategy::Gamma { gammas: gammas.clone() },
            StrategyConfig::Guidance { omegas } => Strategy::Guidance { omegas: omegas.clone() },
            StrategyConfig::Renoise { max_jump } => Strategy::Renoise { max_jump: *max_jump },
        }
    }

    /// Numeric value of each action: `gamma`, `omega`, or jump size.
    pub fn action_grid(&self) -> Vec<f64> {
        match self {
            StrategyConfig::Gamma { gammas } => gammas.clone(),
            StrategyConfig::Guidance { omegas } => omegas.clone(),
            StrategyConfig::Renoise { max_jump } => (0..=*max_jump).map(|k| k as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpConfig {
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nfe_budget: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceKind,
    /// Expert weight on the terminal level; derived from the horizon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_e_terminal_mass: Option<f64>,
}

fn default_divergence() -> DivergenceKind {
    DivergenceKind::Kl
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { divergence: DivergenceKind::Kl, w_e_terminal_mass: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub n_epoch: usize,
    /// Epochs between rollout regenerations.
    pub k: usize,
    pub n_traj: usize,
    pub ppo_epsilon: f64,
    pub lr: f64,
    pub minibatch: usize,
    pub ema_decay: f64,
    pub normalize_signals: bool,
    pub optimizer: OptimizerKind,
    /// Regenerate rollouts and refit the ratio estimator before every epoch.
    pub exact_refresh: bool,
    /// Replace the clipped surrogate by importance-weighted full-batch gradients.
    pub importance_sampling: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            n_epoch: 40,
            k: 4,
            n_traj: 1024,
            ppo_epsilon: 0.2,
            lr: 1e-3,
            minibatch: 1024,
            ema_decay: 0.9,
            normalize_signals: false,
            optimizer: OptimizerKind::Adam,
            exact_refresh: false,
            importance_sampling: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub widths: Vec<usize>,
    /// Optimizer steps of the first fit against the initial policy.
    pub dre_init_iters: usize,
    /// Optimizer steps at each later refit.
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub label_smoothing: f64,
    /// Smoothing applies at levels with `sigma >= smoothing_threshold * sigma_max`.
    pub smoothing_threshold: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Expert samples drawn per noise level.
    pub expert_samples: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 64],
            dre_init_iters: 1000,
            iters: 300,
            batch: 256,
            lr: 3e-3,
            label_smoothing: 0.05,
            smoothing_threshold: 0.5,
            ratio_min: DEFAULT_RATIO_MIN,
            ratio_max: DEFAULT_RATIO_MAX,
            expert_samples: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Expert samples used for energy distance and histograms.
    pub n_expert: usize,
    pub histogram_bins: usize,
    pub histogram_range: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_expert: 2048, histogram_bins: 20, histogram_range: [-3.0, 3.0] }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => config_error(other.to_string()),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => config_error(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn target_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::from_spec(&self.target)
    }

    pub fn model_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::from_spec(self.model.as_ref().unwrap_or(&self.target))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(&self.schedule)
    }

    pub fn build_env(&self) -> Result<SamplingEnv> {
        SamplingEnv::new(
            self.model_mixture()?,
            self.noise_schedule()?,
            self.strategy.to_strategy(),
            self.mdp.horizon,
            self.mdp.nfe_budget,
        )
    }

    /// Checks cross-field constraints that the schema alone cannot express.
    pub fn validate(&self) -> Result<()> {
        let target = self.target_mixture()?;
        let model = self.model_mixture()?;
        if target.dim() != model.dim() {
            return Err(config_error("target and model dimensions differ"));
        }
        self.build_env()?;
        let grid_empty = match &self.strategy {
            StrategyConfig::Gamma { gammas } => gammas.is_empty(),
            StrategyConfig::Guidance { omegas } => omegas.is_empty(),
            StrategyConfig::Renoise { max_jump } => *max_jump == 0,
        };
        if grid_empty {
            return Err(config_error("strategy action grid is empty"));
        }
        if let Some(a) = self.objective.w_e_terminal_mass {
            if !(a > 0.0 && a < 1.0) {
                return Err(config_error(format!("w_e_terminal_mass must lie in (0, 1), got {a}")));
            }
        }
        let l = &self.learner;
        if l.n_epoch == 0 || l.k == 0 || l.n_traj < 2 || l.minibatch == 0 {
            return Err(config_error("learner needs n_epoch >= 1, k >= 1, n_traj >= 2, minibatch >= 1"));
        }
        if !(l.ppo_epsilon >= 0.0 && l.ppo_epsilon < 1.0) || !(l.lr > 0.0) || !(0.0..=1.0).contains(&l.ema_decay) {
            return Err(config_error("learner needs ppo_epsilon in [0, 1), lr > 0, ema_decay in [0, 1]"));
        }
        let d = &self.discriminator;
        if d.widths.is_empty() || d.batch == 0 || !(d.lr > 0.0) || d.expert_samples == 0 {
            return Err(config_error("discriminator needs widths, batch >= 1, lr > 0 and expert samples"));
        }
        if !(0.0..0.5).contains(&d.label_smoothing) || !(d.ratio_min > 0.0 && d.ratio_max >= d.ratio_min && d.ratio_max.is_finite()) {
            return Err(config_error("discriminator needs label_smoothing in [0, 0.5) and 0 < ratio_min <= ratio_max"));
        }
        if self.policy.widths.is_empty() {
            return Err(config_error("policy widths must be non-empty"));
        }
        let e = &self.eval;
        if e.n_expert < 2 || e.histogram_bins == 0 || !(e.histogram_range[1] > e.histogram_range[0]) {
            return Err(config_error("eval needs n_expert >= 2, bins >= 1 and a non-empty range"));
        }
        Ok(())
    }
}
