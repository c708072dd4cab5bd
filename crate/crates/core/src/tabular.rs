//! Small discrete MDPs where occupancy measures, divergences and their
//! gradients are computed exactly. Used to verify the policy-gradient
//! estimator and the level/conditional decomposition of occupancy divergences.

use rand::Rng;

use crate::divergence::{divergence_discrete, DivergenceKind, FGenerator};
use crate::error::{invalid, Error, Result};
use crate::learner::{learning_signals, weighted_pg_gradient, Episode};
use crate::mdp::sample_categorical;
use crate::policy::ScoreFunction;

/// Default cap on the number of enumerated trajectories.
pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial: Vec<f64>,
    /// `kernel[s * A + a]` is the next-state distribution.
    pub kernel: Vec<Vec<f64>>,
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::ShapeMismatch { expected: len, actual: row.len() });
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(invalid(format!("{what} has an invalid entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(invalid(format!("{what} sums to {total}")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(num_actions: usize, horizon: usize, initial: Vec<f64>, kernel: Vec<Vec<f64>>) -> Result<Self> {
        let s = initial.len();
        if s == 0 || num_actions == 0 || horizon == 0 {
            return Err(invalid("tabular MDP needs states, actions and a positive horizon"));
        }
        check_row(&initial, s, "initial distribution")?;
        if kernel.len() != s * num_actions {
            return Err(Error::ShapeMismatch { expected: s * num_actions, actual: kernel.len() });
        }
        for (i, row) in kernel.iter().enumerate() {
            check_row(row, s, &format!("kernel row {i}"))?;
        }
        Ok(Self { num_states: s, num_actions, horizon, initial, kernel })
    }

    pub fn next_states(&self, s: usize, a: usize) -> &[f64] {
        &self.kernel[s * self.num_actions + a]
    }

    /// Samples `(s_0..s_T, a_1..a_T, ln pi(a_t | s_{t-1}))`.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, policy: &TabularPolicy, rng: &mut R) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut states = vec![sample_categorical(&self.initial, rng)];
        let mut actions = Vec::with_capacity(self.horizon);
        let mut logprobs = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let s = *states.last().expect("non-empty");
            let probs = policy.probabilities(&s);
            let a = sample_categorical(&probs, rng);
            actions.push(a);
            logprobs.push(probs[a].ln());
            states.push(sample_categorical(self.next_states(s, a), rng));
        }
        (states, actions, logprobs)
    }
}

/// Stationary softmax policy with one logit per state-action pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub num_states: usize,
    pub num_actions: usize,
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != num_states * num_actions {
            return Err(Error::ShapeMismatch { expected: num_states * num_actions, actual: logits.len() });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("tabular logits".into()));
        }
        Ok(Self { num_states, num_actions, logits })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self { num_states, num_actions, logits: vec![0.0; num_states * num_actions] }
    }
}

impl ScoreFunction<usize> for TabularPolicy {
    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn log_prob(&self, state: &usize, action: usize) -> f64 {
        self.probabilities(state)[action].ln()
    }

    fn accumulate_log_prob_grad(&self, state: &usize, action: usize, scale: f64, grad: &mut [f64]) {
        let probs = self.probabilities(state);
        let base = state * self.num_actions;
        for (b, p) in probs.iter().enumerate() {
            grad[base + b] += scale * (if b == action { 1.0 } else { 0.0 } - p);
        }
    }

    fn probabilities(&self, state: &usize) -> Vec<f64> {
        let row = &self.logits[state * self.num_actions..(state + 1) * self.num_actions];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

fn check_pair(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.num_states != mdp.num_states || policy.num_actions != mdp.num_actions {
        return Err(invalid("policy and MDP disagree on state or action counts"));
    }
    Ok(())
}

/// Policy-induced state transition matrix `M[s][s']`.
fn transition_matrix(mdp: &TabularMdp, policy: &TabularPolicy) -> Vec<Vec<f64>> {
    (0..mdp.num_states)
        .map(|s| {
            let probs = policy.probabilities(&s);
            let mut row = vec![0.0; mdp.num_states];
            for (a, pa) in probs.iter().enumerate() {
                for (r, p) in row.iter_mut().zip(mdp.next_states(s, a)) {
                    *r += pa * p;
                }
            }
            row
        })
        .collect()
}

/// `mu(s) = (1/T) sum_{t=1}^T P(s_t = s)` by forward dynamic programming.
pub fn exact_occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    check_pair(mdp, policy)?;
    let m = transition_matrix(mdp, policy);
    let mut marginal = mdp.initial.clone();
    let mut mu = vec![0.0; mdp.num_states];
    for _ in 0..mdp.horizon {
        let mut next = vec![0.0; mdp.num_states];
        for (s, ps) in marginal.iter().enumerate() {
            for (n, p) in next.iter_mut().zip(&m[s]) {
                *n += ps * p;
            }
        }
        for (u, v) in mu.iter_mut().zip(&next) {
            *u += v;
        }
        marginal = next;
    }
    let scale = 1.0 / mdp.horizon as f64;
    mu.iter_mut().for_each(|v| *v *= scale);
    Ok(mu)
}

/// `D_f(mu_E || mu_theta)`.
pub fn exact_objective<G: FGenerator + ?Sized>(mdp: &TabularMdp, policy: &TabularPolicy, mu_e: &[f64], gen: &G) -> Result<f64> {
    Ok(divergence_discrete(gen, mu_e, &exact_occupancy(mdp, policy)?)?.value)
}

/// Central finite differences of [`exact_objective`] in every logit.
pub fn fd_gradient<G: FGenerator + ?Sized>(mdp: &TabularMdp, policy: &TabularPolicy, mu_e: &[f64], gen: &G, eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut grad = vec![0.0; policy.logits.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let mut hi = policy.clone();
        hi.logits[i] += eps;
        let mut lo = policy.clone();
        lo.logits[i] -= eps;
        *g = (exact_objective(mdp, &hi, mu_e, gen)? - exact_objective(mdp, &lo, mu_e, gen)?) / (2.0 * eps);
    }
    Ok(grad)
}

/// Analytic gradient by differentiating the occupancy recursion (forward mode).
pub fn dp_gradient<G: FGenerator + ?Sized>(mdp: &TabularMdp, policy: &TabularPolicy, mu_e: &[f64], gen: &G) -> Result<Vec<f64>> {
    let mu = exact_occupancy(mdp, policy)?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let m = transition_matrix(mdp, policy);
    let probs: Vec<Vec<f64>> = (0..ns).map(|s| policy.probabilities(&s)).collect();
    let np = ns * na;
    let mut marginal = mdp.initial.clone();
    let mut d_marginal = vec![vec![0.0; ns]; np];
    let mut d_mu = vec![vec![0.0; ns]; np];
    for _ in 0..mdp.horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for (n, p) in next.iter_mut().zip(&m[s]) {
                *n += marginal[s] * p;
            }
        }
        let mut d_next = vec![vec![0.0; ns]; np];
        for (k, dn) in d_next.iter_mut().enumerate() {
            for s in 0..ns {
                let dm = d_marginal[k][s];
                if dm != 0.0 {
                    for (v, p) in dn.iter_mut().zip(&m[s]) {
                        *v += dm * p;
                    }
                }
            }
            // d M[s][s'] / d logit(s, b) = pi(b | s) (P(s' | s, b) - M[s][s'])
            let (s, b) = (k / na, k % na);
            let c = marginal[s] * probs[s][b];
            for (sp, v) in dn.iter_mut().enumerate() {
                *v += c * (mdp.next_states(s, b)[sp] - m[s][sp]);
            }
        }
        for k in 0..np {
            for s in 0..ns {
                d_mu[k][s] += d_next[k][s];
            }
        }
        marginal = next;
        d_marginal = d_next;
    }
    let scale = 1.0 / mdp.horizon as f64;
    let mut h = vec![0.0; ns];
    for s in 0..ns {
        if mu[s] > 0.0 {
            if mu_e[s] <= 0.0 {
                return Err(invalid("expert occupancy must be positive on states the policy visits"));
            }
            h[s] = gen.h(mu_e[s] / mu[s]);
        }
    }
    Ok(d_mu.iter().map(|dm| scale * dm.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()).collect())
}

/// A trajectory together with its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedTrajectory {
    /// `s_0..s_T`.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub probability: f64,
}

impl EnumeratedTrajectory {
    pub fn episode(&self) -> Episode<'_, usize> {
        Episode {
            states: self.states[..self.actions.len()].iter().collect(),
            actions: self.actions.clone(),
            logprobs: self.logprobs.clone(),
        }
    }
}

/// Upper bound on the number of trajectories, `S (A S)^T`.
pub fn enumeration_size(mdp: &TabularMdp) -> u128 {
    let branch = (mdp.num_actions * mdp.num_states) as u128;
    (0..mdp.horizon).try_fold(mdp.num_states as u128, |acc, _| acc.checked_mul(branch)).unwrap_or(u128::MAX)
}

/// Every trajectory with positive probability under `policy`.
pub fn enumerate_trajectories(mdp: &TabularMdp, policy: &TabularPolicy, cap: u128) -> Result<Vec<EnumeratedTrajectory>> {
    check_pair(mdp, policy)?;
    let size = enumeration_size(mdp);
    if size > cap {
        return Err(Error::EnumerationTooLarge { size, cap });
    }
    let mut out = Vec::new();
    let mut stack: Vec<EnumeratedTrajectory> = mdp
        .initial
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(s, p)| EnumeratedTrajectory { states: vec![s], actions: vec![], logprobs: vec![], probability: *p })
        .collect();
    while let Some(node) = stack.pop() {
        if node.actions.len() == mdp.horizon {
            out.push(node);
            continue;
        }
        let s = *node.states.last().expect("non-empty");
        let probs = policy.probabilities(&s);
        for (a, pa) in probs.iter().enumerate() {
            if *pa == 0.0 {
                continue;
            }
            for (sn, ps) in mdp.next_states(s, a).iter().enumerate() {
                if *ps == 0.0 {
                    continue;
                }
                let mut child = node.clone();
                child.states.push(sn);
                child.actions.push(a);
                child.logprobs.push(pa.ln());
                child.probability *= pa * ps;
                stack.push(child);
            }
        }
    }
    Ok(out)
}

/// Exact ratios `mu_E / mu_theta` along each enumerated trajectory turned into learning signals.
pub fn enumerated_signals<G: FGenerator + ?Sized>(
    trajectories: &[EnumeratedTrajectory],
    mu_e: &[f64],
    mu_theta: &[f64],
    gen: &G,
) -> Result<Vec<Vec<f64>>> {
    trajectories
        .iter()
        .map(|tr| {
            let ratios: Vec<f64> = tr.states[1..].iter().map(|s| mu_e[*s] / mu_theta[*s]).collect();
            learning_signals(&ratios, gen)
        })
        .collect()
}

/// Exact expectation of the trajectory-level gradient estimator, by enumeration.
pub fn estimator_gradient<G: FGenerator + ?Sized>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    mu_e: &[f64],
    gen: &G,
    cap: u128,
) -> Result<Vec<f64>> {
    let mu = exact_occupancy(mdp, policy)?;
    let trajectories = enumerate_trajectories(mdp, policy, cap)?;
    let signals = enumerated_signals(&trajectories, mu_e, &mu, gen)?;
    let episodes: Vec<Episode<usize>> = trajectories.iter().map(EnumeratedTrajectory::episode).collect();
    let weights: Vec<f64> = trajectories.iter().map(|t| t.probability).collect();
    weighted_pg_gradient(policy, &episodes, &signals, &weights)
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Random instance with dense kernels, logits in `[-1, 1]` and a positive expert occupancy.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, states: usize, actions: usize, horizon: usize) -> (TabularMdp, TabularPolicy, Vec<f64>) {
    let initial = random_simplex(rng, states, 0.05);
    let kernel = (0..states * actions).map(|_| random_simplex(rng, states, 0.05)).collect();
    let mdp = TabularMdp::new(actions, horizon, initial, kernel).expect("valid by construction");
    let logits = (0..states * actions).map(|_| rng.random_range(-1.0..1.0)).collect();
    let policy = TabularPolicy::new(states, actions, logits).expect("valid by construction");
    let mu_e = random_simplex(rng, states, 0.1);
    (mdp, policy, mu_e)
}

/// Terms of the level/conditional split of an occupancy divergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub total: f64,
    pub level_term: f64,
    pub conditional_term: f64,
}

/// Marginal over levels of a `[levels x bins]` row-major occupancy.
pub fn level_marginal(mu: &[f64], bins: usize) -> Vec<f64> {
    mu.chunks(bins).map(|r| r.iter().sum()).collect()
}

/// Splits `D(mu_E || mu_theta)` into a level-weight term and conditional terms:
/// KL weights the conditional divergences by `w_E`, reverse KL by `w_theta`.
pub fn decompose(kind: DivergenceKind, mu_e: &[f64], mu_theta: &[f64], bins: usize) -> Result<Decomposition> {
    if bins == 0 || mu_e.len() != mu_theta.len() || mu_e.len() % bins != 0 {
        return Err(invalid("occupancies must be [levels x bins] with matching shapes"));
    }
    let total = divergence_discrete(&kind, mu_e, mu_theta)?.value;
    let we = level_marginal(mu_e, bins);
    let wt = level_marginal(mu_theta, bins);
    let level_term = divergence_discrete(&kind, &we, &wt)?.value;
    let mut conditional_term = 0.0;
    for (l, (e_row, t_row)) in mu_e.chunks(bins).zip(mu_theta.chunks(bins)).enumerate() {
        let weight = match kind {
            DivergenceKind::Kl => we[l],
            DivergenceKind::Rkl => wt[l],
        };
        if weight == 0.0 {
            continue;
        }
        let pe: Vec<f64> = e_row.iter().map(|v| v / we[l]).collect();
        let pt: Vec<f64> = t_row.iter().map(|v| v / wt[l]).collect();
        conditional_term += weight * divergence_discrete(&kind, &renormalize(pe), &renormalize(pt))?.value;
    }
    Ok(Decomposition { total, level_term, conditional_term })
}

fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Pair of strictly positive random `[levels x bins]` occupancies.
pub fn random_factored<R: Rng + ?Sized>(rng: &mut R, levels: usize, bins: usize) -> (Vec<f64>, Vec<f64>) {
    (random_simplex(rng, levels * bins, 0.01), random_simplex(rng, levels * bins, 0.01))
}

/// Outcome of one estimator-versus-finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub kind: DivergenceKind,
    pub max_abs_error: f64,
}

/// Random instances with `S <= 4`, `A <= 3`, `T <= 4`, checked for both KL and reverse KL.
pub fn gradcheck_suite(cases: usize, seed: u64) -> Result<Vec<GradcheckCase>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * cases);
    for _ in 0..cases {
        let s = rng.random_range(2..=4);
        let a = rng.random_range(2..=3);
        let t = rng.random_range(2..=4);
        let (mdp, policy, mu_e) = random_instance(&mut rng, s, a, t);
        for kind in [DivergenceKind::Kl, DivergenceKind::Rkl] {
            let est = estimator_gradient(&mdp, &policy, &mu_e, &kind, DEFAULT_ENUMERATION_CAP)?;
            let fd = fd_gradient(&mdp, &policy, &mu_e, &kind, 1e-5)?;
            let err = est.iter().zip(&fd).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            out.push(GradcheckCase { states: s, actions: a, horizon: t, kind, max_abs_error: err });
        }
    }
    Ok(out)
}
