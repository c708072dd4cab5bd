//! The sampling process as a finite-horizon MDP.
//!
//! A state is a sample `x` at noise level `Sigma_i`. Each step the policy picks
//! a discrete control (stochasticity `gamma`, guidance scale `omega`, or a
//! renoise jump) and the transition applies the matching sampler operator.
//! `Sigma_0` is absorbing: once reached, non-renoise strategies stay put.
//!
//! Trajectory convention: action `a_t` is chosen at `s_{t-1}` and produces
//! `s_t`; occupancy is measured over `s_1..s_T`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::indexed_rng;
use crate::sampler::{edm_stoch_step, guided_denoise, heun_step, renoise, NoiseSchedule};
use crate::target::GaussianMixture;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Gamma,
    Guidance,
    Renoise,
}

/// A control strategy together with its action grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    /// Stochasticity injection with one `gamma` per action.
    Gamma { gammas: Vec<f64> },
    /// Classifier-free guidance with one `omega` per action.
    Guidance { omegas: Vec<f64> },
    /// Action 0 continues descending; action `k` jumps up `k` levels.
    Renoise { max_jump: usize },
}

impl Strategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::Gamma { .. } => StrategyKind::Gamma,
            Strategy::Guidance { .. } => StrategyKind::Guidance,
            Strategy::Renoise { .. } => StrategyKind::Renoise,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            Strategy::Gamma { gammas } => gammas.len(),
            Strategy::Guidance { omegas } => omegas.len(),
            Strategy::Renoise { max_jump } => max_jump + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub x: Vec<f64>,
    /// Level number `i`, so that `sigma_t = Sigma_i`.
    pub level: usize,
    /// Time step `t`.
    pub step: usize,
    /// Denoiser evaluations spent so far along the trajectory.
    pub nfe_used: u32,
    /// Conditioning class for guided sampling.
    pub class: Option<usize>,
}

impl State {
    /// Same point in state space (sample and level), ignoring bookkeeping.
    pub fn same_point(&self, other: &State) -> bool {
        self.x == other.x && self.level == other.level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Action {
    pub strategy: StrategyKind,
    pub index: usize,
}

/// Everything needed to decide which actions are available in a state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRules {
    pub strategy: StrategyKind,
    pub action_count: usize,
    pub num_levels: usize,
    pub horizon: usize,
    pub nfe_budget: Option<u32>,
    /// Index of the conservative action (`gamma = 0`, `omega = 0`, continue).
    pub safe_action: usize,
}

/// Denoiser evaluations needed to descend straight from `Sigma_level` to `Sigma_0`.
pub fn descent_cost(level: usize) -> u32 {
    if level == 0 {
        0
    } else {
        2 * level as u32 - 1
    }
}

impl ActionRules {
    pub fn mask(&self, state: &State) -> Vec<bool> {
        (0..self.action_count).map(|a| self.is_available(state, a)).collect()
    }

    pub fn is_available(&self, state: &State, action: usize) -> bool {
        if action >= self.action_count {
            return false;
        }
        match self.strategy {
            StrategyKind::Gamma | StrategyKind::Guidance => state.level > 0 || action == self.safe_action,
            StrategyKind::Renoise => {
                if action == 0 {
                    return true;
                }
                let target = state.level + action;
                if target > self.num_levels {
                    return false;
                }
                // after the jump the sample must still be able to reach Sigma_0
                // within both the step horizon and the evaluation budget
                if state.step + 1 + target > self.horizon {
                    return false;
                }
                match self.nfe_budget {
                    Some(b) => state.nfe_used + descent_cost(target) <= b,
                    None => true,
                }
            }
        }
    }

    pub fn available_count(&self, state: &State) -> usize {
        (0..self.action_count).filter(|&a| self.is_available(state, a)).count()
    }
}

/// The sampling environment: frozen denoiser, schedule, strategy, horizon, budget.
#[derive(Clone, Debug)]
pub struct SamplingEnv {
    model: GaussianMixture,
    schedule: NoiseSchedule,
    strategy: Strategy,
    horizon: usize,
    nfe_budget: Option<u32>,
}

impl SamplingEnv {
    pub fn new(
        model: GaussianMixture,
        schedule: NoiseSchedule,
        strategy: Strategy,
        horizon: usize,
        nfe_budget: Option<u32>,
    ) -> Result<Self> {
        let n = schedule.num_levels();
        if horizon < n {
            return Err(invalid(format!("horizon {horizon} is shorter than the {n} levels to descend")));
        }
        match &strategy {
            Strategy::Gamma { gammas } => {
                if gammas.is_empty() || gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
                    return Err(invalid("gamma grid must be non-empty with non-negative entries"));
                }
                if !gammas.contains(&0.0) {
                    return Err(invalid("gamma grid must contain 0"));
                }
            }
            Strategy::Guidance { omegas } => {
                if omegas.is_empty() || omegas.iter().any(|w| !w.is_finite()) {
                    return Err(invalid("guidance grid must be non-empty and finite"));
                }
                if !omegas.contains(&0.0) {
                    return Err(invalid("guidance grid must contain 0"));
                }
            }
            Strategy::Renoise { max_jump } => {
                if *max_jump == 0 {
                    return Err(invalid("renoise needs max_jump >= 1"));
                }
            }
        }
        if let Some(b) = nfe_budget {
            if b < descent_cost(n) {
                return Err(invalid(format!(
                    "nfe budget {b} cannot cover a straight descent costing {}",
                    descent_cost(n)
                )));
            }
        }
        Ok(Self { model, schedule, strategy, horizon, nfe_budget })
    }

    pub fn model(&self) -> &GaussianMixture {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nfe_budget(&self) -> Option<u32> {
        self.nfe_budget
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn action_count(&self) -> usize {
        self.strategy.action_count()
    }

    pub fn rules(&self) -> ActionRules {
        let safe_action = match &self.strategy {
            Strategy::Gamma { gammas } => gammas.iter().position(|g| *g == 0.0).expect("validated"),
            Strategy::Guidance { omegas } => omegas.iter().position(|w| *w == 0.0).expect("validated"),
            Strategy::Renoise { .. } => 0,
        };
        ActionRules {
            strategy: self.strategy.kind(),
            action_count: self.action_count(),
            num_levels: self.schedule.num_levels(),
            horizon: self.horizon,
            nfe_budget: self.nfe_budget,
            safe_action,
        }
    }

    pub fn sigma(&self, state: &State) -> f64 {
        self.schedule.sigma(state.level)
    }

    pub fn action_space(&self, state: &State) -> Vec<Action> {
        let rules = self.rules();
        let kind = self.strategy.kind();
        (0..rules.action_count)
            .filter(|&a| rules.is_available(state, a))
            .map(|index| Action { strategy: kind, index })
            .collect()
    }

    /// Draws `s_0`: `x ~ N(0, Sigma_N^2 I)` at the top level, plus a class
    /// label from the model weights for guided sampling.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let top = self.schedule.sigma_max();
        let x = (0..self.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                top * z
            })
            .collect();
        let class = match self.strategy {
            Strategy::Guidance { .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let weights = self.model.weights();
                let mut chosen = weights.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        chosen = k;
                        break;
                    }
                }
                Some(chosen)
            }
            _ => None,
        };
        State { x, level: self.schedule.num_levels(), step: 0, nfe_used: 0, class }
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        self.model.denoise(x, sigma, None).expect("state dimension matches the model")
    }

    /// Applies `action` in `state`, returning the next state and the evaluations spent.
    pub fn transition<R: Rng + ?Sized>(&self, state: &State, action: usize, rng: &mut R) -> Result<(State, u32)> {
        let rules = self.rules();
        if !rules.is_available(state, action) {
            return Err(invalid(format!(
                "action {action} is not available at level {} step {}",
                state.level, state.step
            )));
        }
        if state.x.len() != self.dim() {
            return Err(Error::ShapeMismatch { expected: self.dim(), actual: state.x.len() });
        }
        let mut next = state.clone();
        next.step += 1;
        let level = state.level;
        let sigma = self.schedule.sigma(level);

        let (x, level_next, nfe) = match &self.strategy {
            _ if level == 0 && (action == 0 || self.strategy.kind() != StrategyKind::Renoise) => {
                (state.x.clone(), 0, 0)
            }
            Strategy::Gamma { gammas } => {
                let to = self.schedule.sigma(level - 1);
                let (x, nfe) = edm_stoch_step(|x, s| self.denoise(x, s), &state.x, sigma, to, gammas[action], rng)?;
                (x, level - 1, nfe)
            }
            Strategy::Guidance { omegas } => {
                let class = state.class.ok_or_else(|| invalid("guided sampling needs a class label"))?;
                let omega = omegas[action];
                let to = self.schedule.sigma(level - 1);
                let den = |x: &[f64], s: f64| guided_denoise(&self.model, x, s, class, omega).expect("valid class");
                let (x, nfe) = heun_step(den, &state.x, sigma, to)?;
                (x, level - 1, nfe)
            }
            Strategy::Renoise { .. } => {
                if action == 0 {
                    let to = self.schedule.sigma(level - 1);
                    let (x, nfe) = heun_step(|x, s| self.denoise(x, s), &state.x, sigma, to)?;
                    (x, level - 1, nfe)
                } else {
                    let target = level + action;
                    let x = renoise(&state.x, sigma, self.schedule.sigma(target), rng)?;
                    (x, target, 0)
                }
            }
        };
        next.x = x;
        next.level = level_next;
        next.nfe_used += nfe;
        Ok((next, nfe))
    }
}

/// Anything that scores actions in a state. Masked actions are ignored by callers.
pub trait StatePolicy: Sync {
    fn logits(&self, env: &SamplingEnv, state: &State) -> Vec<f64>;
}

/// A fixed logit vector shared by every state, e.g. "always continue".
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantPolicy {
    pub logits: Vec<f64>,
}

impl ConstantPolicy {
    /// Deterministically prefers `action` wherever it is available.
    pub fn always(action: usize, action_count: usize) -> Self {
        let logits = (0..action_count).map(|a| if a == action { 0.0 } else { -1e9 }).collect();
        Self { logits }
    }
}

impl StatePolicy for ConstantPolicy {
    fn logits(&self, _env: &SamplingEnv, _state: &State) -> Vec<f64> {
        self.logits.clone()
    }
}

/// Softmax of `logits / beta` restricted to the unmasked entries.
pub fn masked_softmax(logits: &[f64], mask: &[bool], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {beta}")));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l / beta)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("no available action has a finite logit".into()));
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { (l / beta - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Inverse-CDF draw; consumes no randomness when only one action has mass.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let support: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    if support.len() == 1 {
        return support[0];
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &i in &support {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *support.last().expect("non-empty support")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `s_0`, excluded from the occupancy measure.
    pub initial: State,
    /// `s_1..s_T`.
    pub states: Vec<State>,
    /// `a_1..a_T`, with `a_t` chosen at `s_{t-1}`.
    pub actions: Vec<usize>,
    /// `ln pi(a_t | s_{t-1})` under the sampling temperature.
    pub logprobs: Vec<f64>,
    pub nfe: Vec<u32>,
    pub total_nfe: u32,
    pub terminal_reached: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State in which action `t` (0-based) was chosen, i.e. `s_t` for `a_{t+1}`.
    pub fn decision_state(&self, t: usize) -> &State {
        if t == 0 {
            &self.initial
        } else {
            &self.states[t - 1]
        }
    }

    pub fn final_state(&self) -> &State {
        self.states.last().unwrap_or(&self.initial)
    }

    pub fn levels(&self) -> Vec<usize> {
        self.states.iter().map(|s| s.level).collect()
    }
}

/// One episode under `policy` at temperature `beta`.
pub fn rollout<P, R>(env: &SamplingEnv, policy: &P, beta: f64, rng: &mut R) -> Result<Trajectory>
where
    P: StatePolicy + ?Sized,
    R: Rng + ?Sized,
{
    let rules = env.rules();
    let initial = env.initial_state(rng);
    let horizon = env.horizon();
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut logprobs = Vec::with_capacity(horizon);
    let mut nfe = Vec::with_capacity(horizon);
    let mut current = initial.clone();
    for _ in 0..horizon {
        let mask = rules.mask(&current);
        let logits = policy.logits(env, &current);
        if logits.len() != rules.action_count {
            return Err(Error::ShapeMismatch { expected: rules.action_count, actual: logits.len() });
        }
        let probs = masked_softmax(&logits, &mask, beta)?;
        let action = sample_categorical(&probs, rng);
        let (next, cost) = env.transition(&current, action, rng)?;
        actions.push(action);
        logprobs.push(probs[action].ln());
        nfe.push(cost);
        states.push(next.clone());
        current = next;
    }
    let total_nfe = nfe.iter().sum();
    let terminal_reached = current.level == 0;
    Ok(Trajectory { initial, states, actions, logprobs, nfe, total_nfe, terminal_reached })
}

/// `n_traj` rollouts in parallel; trajectory `i` draws from stream `(seed, i)`.
pub fn rollout_batch<P>(env: &SamplingEnv, policy: &P, beta: f64, n_traj: usize, seed: u64) -> Result<Vec<Trajectory>>
where
    P: StatePolicy + ?Sized,
{
    if n_traj == 0 {
        return Err(invalid("need at least one trajectory"));
    }
    (0..n_traj)
        .into_par_iter()
        .map(|i| rollout(env, policy, beta, &mut trajectory_rng(seed, i)))
        .collect()
}

/// Sequential counterpart of [`rollout_batch`]; produces identical trajectories.
pub fn rollout_batch_serial<P>(
    env: &SamplingEnv,
    policy: &P,
    beta: f64,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<Trajectory>>
where
    P: StatePolicy + ?Sized,
{
    if n_traj == 0 {
        return Err(invalid("need at least one trajectory"));
    }
    (0..n_traj)
        .map(|i| rollout(env, policy, beta, &mut trajectory_rng(seed, i)))
        .collect()
}

fn trajectory_rng(seed: u64, i: usize) -> ChaCha8Rng {
    indexed_rng(seed, i as u64)
}
