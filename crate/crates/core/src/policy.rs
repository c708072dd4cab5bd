//! Discrete-action sampling policies.
//!
//! Two families are provided: a table of logits indexed by noise level
//! (optionally also by step), and a small dense network over the sample,
//! a sinusoidal embedding of `ln sigma`, an optional step embedding and, for
//! guided sampling, a one-hot class label.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{masked_softmax, sample_categorical, Action, ActionRules, SamplingEnv, State, StatePolicy, StrategyKind};
use crate::nn::{embedding_sigma, push_scaled_state, push_sigma_embedding, push_step_embedding, Mlp, SIGMA_FREQUENCIES, STEP_FREQUENCIES};

/// Initial probability placed on the conservative action.
pub const HEURISTIC_PROBABILITY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    SigmaOnly,
    StateDependent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    /// Probability [`HEURISTIC_PROBABILITY`] on the conservative action.
    Safe,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub family: PolicyFamily,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_heuristic")]
    pub heuristic: Heuristic,
    #[serde(default = "default_stationary")]
    pub stationary: bool,
}

fn default_widths() -> Vec<usize> {
    vec![64, 64]
}

fn default_heuristic() -> Heuristic {
    Heuristic::Safe
}

fn default_stationary() -> bool {
    true
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self { family: PolicyFamily::SigmaOnly, widths: default_widths(), heuristic: Heuristic::Safe, stationary: true }
    }
}

/// Logit vector implementing the heuristic initialization.
pub fn heuristic_logits(heuristic: Heuristic, action_count: usize, safe_action: usize) -> Vec<f64> {
    let mut logits = vec![0.0; action_count];
    if heuristic == Heuristic::Safe && action_count > 1 {
        let p = HEURISTIC_PROBABILITY;
        logits[safe_action] = (p * (action_count - 1) as f64 / (1.0 - p)).ln();
    }
    logits
}

/// Differentiable log-probability of discrete actions in states of type `S`.
///
/// The learner is written against this trait so that the same gradient code
/// runs for sampling policies and for tabular test problems.
pub trait ScoreFunction<S> {
    fn num_params(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// `ln pi(action | state)` at temperature 1.
    fn log_prob(&self, state: &S, action: usize) -> f64;

    /// Adds `scale * grad ln pi(action | state)` to `grad`.
    fn accumulate_log_prob_grad(&self, state: &S, action: usize, scale: f64, grad: &mut [f64]);

    /// Action distribution at temperature 1.
    fn probabilities(&self, state: &S) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Body {
    /// Row-major `[rows x action_count]` logits.
    Table { rows: usize, logits: Vec<f64> },
    Net(Mlp),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    family: PolicyFamily,
    stationary: bool,
    rules: ActionRules,
    /// Ascending noise levels, `sigmas[i] = Sigma_i`.
    sigmas: Vec<f64>,
    sigma_data: f64,
    dim: usize,
    num_classes: Option<usize>,
    body: Body,
}

impl SamplingPolicy {
    pub fn new<R: Rng + ?Sized>(spec: &PolicySpec, env: &SamplingEnv, rng: &mut R) -> Result<Self> {
        let rules = env.rules();
        let a = rules.action_count;
        let init = heuristic_logits(spec.heuristic, a, rules.safe_action);
        let num_classes = (rules.strategy == StrategyKind::Guidance).then(|| env.model().num_components());
        let mut policy = Self {
            family: spec.family,
            stationary: spec.stationary,
            rules,
            sigmas: env.schedule().sigmas().to_vec(),
            sigma_data: env.model().data_std(),
            dim: env.dim(),
            num_classes,
            body: Body::Table { rows: 0, logits: Vec::new() },
        };
        policy.body = match spec.family {
            PolicyFamily::SigmaOnly => {
                let rows = policy.sigmas.len() * if spec.stationary { 1 } else { rules.horizon };
                let logits = (0..rows).flat_map(|_| init.iter().copied()).collect();
                Body::Table { rows, logits }
            }
            PolicyFamily::StateDependent => {
                if spec.widths.is_empty() {
                    return Err(invalid("state-dependent policy needs at least one hidden layer"));
                }
                let mut sizes = vec![policy.input_dim()];
                sizes.extend(&spec.widths);
                sizes.push(a);
                let mut net = Mlp::new(&sizes, rng)?;
                net.output_bias_mut().copy_from_slice(&init);
                Body::Net(net)
            }
        };
        Ok(policy)
    }

    pub fn family(&self) -> PolicyFamily {
        self.family
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn rules(&self) -> &ActionRules {
        &self.rules
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn action_count(&self) -> usize {
        self.rules.action_count
    }

    pub fn layer_sizes(&self) -> Option<&[usize]> {
        match &self.body {
            Body::Net(net) => Some(net.sizes()),
            Body::Table { .. } => None,
        }
    }

    fn input_dim(&self) -> usize {
        let step = if self.stationary { 0 } else { 2 * STEP_FREQUENCIES };
        self.dim + 2 * SIGMA_FREQUENCIES + step + self.num_classes.unwrap_or(0)
    }

    fn features(&self, state: &State) -> Vec<f64> {
        let sigma = self.sigmas[state.level];
        let mut out = Vec::with_capacity(self.input_dim());
        push_scaled_state(&mut out, &state.x, sigma, self.sigma_data);
        push_sigma_embedding(&mut out, embedding_sigma(sigma, 0.5 * self.sigmas[1]));
        if !self.stationary {
            push_step_embedding(&mut out, state.step, self.rules.horizon);
        }
        if let Some(k) = self.num_classes {
            let c = state.class.unwrap_or(usize::MAX);
            out.extend((0..k).map(|i| if i == c { 1.0 } else { 0.0 }));
        }
        out
    }

    fn row(&self, state: &State) -> usize {
        if self.stationary {
            state.level
        } else {
            state.level * self.rules.horizon + state.step.min(self.rules.horizon - 1)
        }
    }

    fn check_state(&self, state: &State) -> Result<()> {
        if state.x.len() != self.dim {
            return Err(Error::ShapeMismatch { expected: self.dim, actual: state.x.len() });
        }
        if state.level >= self.sigmas.len() {
            return Err(invalid(format!("level {} outside the schedule", state.level)));
        }
        Ok(())
    }

    /// Raw logits before masking.
    pub fn raw_logits(&self, state: &State) -> Vec<f64> {
        let a = self.rules.action_count;
        match &self.body {
            Body::Table { logits, .. } => {
                let r = self.row(state);
                logits[r * a..(r + 1) * a].to_vec()
            }
            Body::Net(net) => net.forward(&self.features(state)),
        }
    }

    /// Logits with unavailable actions set to `-inf`.
    pub fn action_logits(&self, state: &State) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mask = self.rules.mask(state);
        Ok(self
            .raw_logits(state)
            .into_iter()
            .zip(mask)
            .map(|(l, m)| if m { l } else { f64::NEG_INFINITY })
            .collect())
    }

    /// Action distribution at temperature `beta`.
    pub fn distribution(&self, state: &State, beta: f64) -> Result<Vec<f64>> {
        self.check_state(state)?;
        masked_softmax(&self.raw_logits(state), &self.rules.mask(state), beta)
    }

    /// Draws an action at temperature `beta` and returns its log-probability at that temperature.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: &State, beta: f64, rng: &mut R) -> Result<(Action, f64)> {
        let probs = self.distribution(state, beta)?;
        let index = sample_categorical(&probs, rng);
        Ok((Action { strategy: self.rules.strategy, index }, probs[index].ln()))
    }

    /// Shannon entropy of the action distribution at temperature `beta`.
    pub fn entropy(&self, state: &State, beta: f64) -> Result<f64> {
        Ok(entropy(&self.distribution(state, beta)?))
    }

    /// Copy of this policy with a different parameter vector (e.g. EMA weights).
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        if params.len() != out.num_params() {
            return Err(Error::ShapeMismatch { expected: out.num_params(), actual: params.len() });
        }
        out.params_mut().copy_from_slice(params);
        Ok(out)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params().iter().position(|p| !p.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("policy parameter {i} is {}", self.params()[i]))),
            None => Ok(()),
        }
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

impl ScoreFunction<State> for SamplingPolicy {
    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn params(&self) -> &[f64] {
        match &self.body {
            Body::Table { logits, .. } => logits,
            Body::Net(net) => net.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.body {
            Body::Table { logits, .. } => logits,
            Body::Net(net) => net.params_mut(),
        }
    }

    fn log_prob(&self, state: &State, action: usize) -> f64 {
        let probs = masked_softmax(&self.raw_logits(state), &self.rules.mask(state), 1.0).expect("some action is available");
        probs[action].ln()
    }

    fn accumulate_log_prob_grad(&self, state: &State, action: usize, scale: f64, grad: &mut [f64]) {
        let a = self.rules.action_count;
        let mask = self.rules.mask(state);
        match &self.body {
            Body::Table { logits, .. } => {
                let r = self.row(state);
                let probs = masked_softmax(&logits[r * a..(r + 1) * a], &mask, 1.0).expect("some action is available");
                for (k, p) in probs.iter().enumerate() {
                    let onehot = if k == action { 1.0 } else { 0.0 };
                    grad[r * a + k] += scale * (onehot - p);
                }
            }
            Body::Net(net) => {
                let trace = net.trace(&self.features(state));
                let probs = masked_softmax(trace.output(), &mask, 1.0).expect("some action is available");
                let upstream: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| scale * (if k == action { 1.0 } else { 0.0 } - p))
                    .collect();
                net.backward(&trace, &upstream, grad);
            }
        }
    }

    fn probabilities(&self, state: &State) -> Vec<f64> {
        masked_softmax(&self.raw_logits(state), &self.rules.mask(state), 1.0).expect("some action is available")
    }
}

impl StatePolicy for SamplingPolicy {
    fn logits(&self, _env: &SamplingEnv, state: &State) -> Vec<f64> {
        self.raw_logits(state)
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl Ema {
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self { shadow: params.to_vec(), decay })
    }

    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::ShapeMismatch { expected: self.shadow.len(), actual: params.len() });
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}
