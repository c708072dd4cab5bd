//! Level weights and the occupancy ratio `mu_E / mu_theta`.
//!
//! An occupancy measure factors as `mu(x, sigma) = w(sigma) p(x | sigma)`, so the
//! ratio splits into a level-weight ratio and a conditional density ratio.

use serde::{Deserialize, Serialize};

use crate::divergence::check_probability_vector;
use crate::error::{invalid, Result};
use crate::mdp::{State, Trajectory};
use crate::ratio::{clamp_ratio, exact_ratio_oracle, Discriminator};
use crate::target::GaussianMixture;

/// Probability vector over levels, indexed so that `weights[i]` belongs to `Sigma_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelWeights {
    pub weights: Vec<f64>,
}

impl LevelWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_probability_vector(&weights, "level weights")?;
        Ok(Self { weights })
    }

    pub fn num_levels(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn terminal(&self) -> f64 {
        self.weights[0]
    }

    pub fn get(&self, level: usize) -> f64 {
        self.weights.get(level).copied().unwrap_or(0.0)
    }
}

/// Fraction of state visits `s_1..s_T` at each level, pooled over trajectories.
pub fn estimate_level_weights(trajectories: &[Trajectory], num_levels: usize) -> Result<LevelWeights> {
    if trajectories.is_empty() {
        return Err(invalid("cannot estimate level weights from zero trajectories"));
    }
    let mut counts = vec![0u64; num_levels + 1];
    for traj in trajectories {
        for s in &traj.states {
            if s.level > num_levels {
                return Err(invalid(format!("state at level {} beyond the schedule", s.level)));
            }
            counts[s.level] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(invalid("trajectories contain no states"));
    }
    Ok(LevelWeights { weights: counts.iter().map(|c| *c as f64 / total as f64).collect() })
}

/// Expert weights: `alpha` on `Sigma_0`, the rest spread evenly over `Sigma_1..Sigma_N`.
pub fn expert_level_weights(num_levels: usize, alpha: f64) -> Result<LevelWeights> {
    if num_levels == 0 {
        return Err(invalid("need at least one noise level"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("terminal mass must lie in (0, 1), got {alpha}")));
    }
    let rest = (1.0 - alpha) / num_levels as f64;
    let mut weights = vec![rest; num_levels + 1];
    weights[0] = alpha;
    Ok(LevelWeights { weights })
}

/// Default terminal mass: the straight-descent share `(T - N + 1) / T` plus 0.1, capped at 0.9.
pub fn default_terminal_mass(num_levels: usize, horizon: usize) -> f64 {
    let straight = (horizon + 1 - num_levels) as f64 / horizon as f64;
    (straight + 0.1).min(0.9)
}

/// Estimate of `p_E(x | sigma) / p_theta(x | sigma)`.
pub trait ConditionalRatio: Sync {
    fn conditional_ratio(&self, x: &[f64], sigma: f64) -> f64;
}

impl ConditionalRatio for Discriminator {
    fn conditional_ratio(&self, x: &[f64], sigma: f64) -> f64 {
        Discriminator::conditional_ratio(self, x, sigma)
    }
}

/// Exact conditional ratio between two analytic mixtures.
#[derive(Clone, Debug)]
pub struct ExactRatio {
    pub expert: GaussianMixture,
    pub policy: GaussianMixture,
}

impl ConditionalRatio for ExactRatio {
    fn conditional_ratio(&self, x: &[f64], sigma: f64) -> f64 {
        exact_ratio_oracle(&self.expert, &self.policy, x, sigma).expect("dimensions match")
    }
}

/// Assembles `mu_E / mu_theta` at visited states.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyRatio {
    pub w_expert: LevelWeights,
    pub w_policy: LevelWeights,
    /// Ascending noise levels.
    pub sigmas: Vec<f64>,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl OccupancyRatio {
    pub fn new(w_expert: LevelWeights, w_policy: LevelWeights, sigmas: Vec<f64>, ratio_min: f64, ratio_max: f64) -> Result<Self> {
        if w_expert.weights.len() != w_policy.weights.len() || w_expert.weights.len() != sigmas.len() {
            return Err(invalid("level weights and schedule disagree on the number of levels"));
        }
        Ok(Self { w_expert, w_policy, sigmas, ratio_min, ratio_max })
    }

    pub fn level_ratio(&self, level: usize) -> Result<f64> {
        let wp = self.w_policy.get(level);
        if wp <= 0.0 {
            return Err(invalid(format!("level {level} was never visited by the policy")));
        }
        Ok(self.w_expert.get(level) / wp)
    }

    /// `(w_E / w_theta)(sigma) * p_E / p_theta (x | sigma)`, clamped after multiplying.
    pub fn ratio<C: ConditionalRatio + ?Sized>(&self, cond: &C, state: &State) -> Result<f64> {
        let w = self.level_ratio(state.level)?;
        let r = w * cond.conditional_ratio(&state.x, self.sigmas[state.level]);
        Ok(clamp_ratio(r, self.ratio_min, self.ratio_max))
    }
}
