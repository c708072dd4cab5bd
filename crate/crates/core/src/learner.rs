//! Policy-gradient estimators for occupancy-measure divergence minimization.
//!
//! The gradient of `D_f(mu_E || mu_theta)` is
//! `E[(1/T) sum_t grad ln pi(a_t | s_{t-1}) A_t]` with `A_t = sum_{t' >= t} h_f(mu_E / mu_theta (s_{t'}))`.
//! Everything here is generic over the state type so that the same code path
//! serves sampling trajectories and enumerated tabular trajectories.

use crate::divergence::FGenerator;
use crate::error::{invalid, Error, Result};
use crate::mdp::{State, Trajectory};
use crate::policy::ScoreFunction;

/// One trajectory seen from the learner: decision states, actions and their
/// log-probabilities under the policy that generated them.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<'a, S> {
    /// `s_0..s_{T-1}`; `states[t]` is where `actions[t]` was chosen.
    pub states: Vec<&'a S>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
}

impl<S> Episode<'_, S> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub fn episode_of(traj: &Trajectory) -> Episode<'_, State> {
    Episode {
        states: (0..traj.len()).map(|t| traj.decision_state(t)).collect(),
        actions: traj.actions.clone(),
        logprobs: traj.logprobs.clone(),
    }
}

/// Suffix sums `A_t = sum_{t' >= t} h(ratio_{t'})`, without the `1 / T` factor.
pub fn learning_signals<G: FGenerator + ?Sized>(ratios: &[f64], gen: &G) -> Result<Vec<f64>> {
    let mut out = vec![0.0; ratios.len()];
    let mut acc = 0.0;
    for t in (0..ratios.len()).rev() {
        let r = ratios[t];
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::NonFinite(format!("occupancy ratio {r} at step {}", t + 1)));
        }
        acc += gen.h(r);
        out[t] = acc;
    }
    Ok(out)
}

/// `A_hat_t = (A_t - mean_i A_t) / T` per time step.
pub fn baseline_recenter(signals: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if signals.len() < 2 {
        return Err(invalid("recentering needs at least two trajectories"));
    }
    let horizon = signals[0].len();
    if let Some(bad) = signals.iter().find(|s| s.len() != horizon) {
        return Err(Error::ShapeMismatch { expected: horizon, actual: bad.len() });
    }
    let n = signals.len() as f64;
    let means: Vec<f64> = (0..horizon).map(|t| signals.iter().map(|s| s[t]).sum::<f64>() / n).collect();
    let scale = 1.0 / horizon as f64;
    Ok(signals
        .iter()
        .map(|s| s.iter().zip(&means).map(|(a, m)| (a - m) * scale).collect())
        .collect())
}

/// Divides every entry by the standard deviation over all entries, if positive.
pub fn normalize_signals(signals: &mut [Vec<f64>]) {
    let count = signals.iter().map(Vec::len).sum::<usize>() as f64;
    if count < 2.0 {
        return;
    }
    let mean = signals.iter().flatten().sum::<f64>() / count;
    let var = signals.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let sd = var.sqrt();
    if sd > 0.0 {
        signals.iter_mut().flatten().for_each(|v| *v /= sd);
    }
}

fn check_batch<S>(episodes: &[Episode<'_, S>], signals: &[Vec<f64>], weights: &[f64]) -> Result<()> {
    if episodes.len() != signals.len() || episodes.len() != weights.len() {
        return Err(invalid("episodes, signals and weights must have equal length"));
    }
    for (e, s) in episodes.iter().zip(signals) {
        if e.states.len() != e.actions.len() || e.actions.len() != s.len() {
            return Err(Error::ShapeMismatch { expected: e.actions.len(), actual: s.len() });
        }
    }
    Ok(())
}

/// `sum_i w_i (1/T) sum_t grad ln pi(a_t | s_{t-1}) signal_t`.
pub fn weighted_pg_gradient<S, P: ScoreFunction<S> + ?Sized>(
    policy: &P,
    episodes: &[Episode<'_, S>],
    signals: &[Vec<f64>],
    weights: &[f64],
) -> Result<Vec<f64>> {
    check_batch(episodes, signals, weights)?;
    let mut grad = vec![0.0; policy.num_params()];
    for ((e, sig), w) in episodes.iter().zip(signals).zip(weights) {
        let scale = w / e.len().max(1) as f64;
        for t in 0..e.len() {
            let c = scale * sig[t];
            if c != 0.0 {
                policy.accumulate_log_prob_grad(e.states[t], e.actions[t], c, &mut grad);
            }
        }
    }
    Ok(grad)
}

/// Monte Carlo policy gradient, averaging over on-policy episodes.
pub fn pg_gradient<S, P: ScoreFunction<S> + ?Sized>(policy: &P, episodes: &[Episode<'_, S>], signals: &[Vec<f64>]) -> Result<Vec<f64>> {
    if episodes.is_empty() {
        return Err(invalid("no episodes"));
    }
    let w = vec![1.0 / episodes.len() as f64; episodes.len()];
    weighted_pg_gradient(policy, episodes, signals, &w)
}

/// Per-episode likelihood ratio `prod_t pi_theta(a_t | s_{t-1}) / pi_0(a_t | s_{t-1})`.
pub fn importance_weights<S, P: ScoreFunction<S> + ?Sized>(policy: &P, episodes: &[Episode<'_, S>]) -> Vec<f64> {
    episodes
        .iter()
        .map(|e| {
            let log_w: f64 = (0..e.len()).map(|t| policy.log_prob(e.states[t], e.actions[t]) - e.logprobs[t]).sum();
            log_w.exp()
        })
        .collect()
}

/// Importance-sampled gradient at `policy` from episodes drawn under another policy.
/// `base_weights` are the sampling weights of the episodes (`1/n` for Monte Carlo).
pub fn is_gradient<S, P: ScoreFunction<S> + ?Sized>(
    policy: &P,
    episodes: &[Episode<'_, S>],
    signals: &[Vec<f64>],
    base_weights: &[f64],
) -> Result<Vec<f64>> {
    let w: Vec<f64> = importance_weights(policy, episodes).iter().zip(base_weights).map(|(a, b)| a * b).collect();
    weighted_pg_gradient(policy, episodes, signals, &w)
}

/// One stored decision with its stale signal.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry<S> {
    pub state: S,
    pub action: usize,
    /// `ln pi_0(a | s)` under the policy that collected the entry.
    pub logprob: f64,
    pub signal: f64,
    pub advantage: f64,
}

/// Clipped term `max(r A, clip(r, 1 - eps, 1 + eps) A)` and its derivative in `r`.
/// The derivative is zero only when the clipped branch is strictly larger.
pub fn ppo_term(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if clipped > unclipped {
        (clipped, 0.0)
    } else {
        (unclipped, advantage)
    }
}

/// Surrogate value and gradient, `scale * sum_e max(r_e A_e, clip(r_e) A_e)`.
pub fn ppo_surrogate<S, P: ScoreFunction<S> + ?Sized>(
    policy: &P,
    entries: &[&BufferEntry<S>],
    epsilon: f64,
    scale: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; policy.num_params()];
    let mut value = 0.0;
    for e in entries {
        let r = (policy.log_prob(&e.state, e.action) - e.logprob).exp();
        let (v, dv) = ppo_term(r, e.advantage, epsilon);
        value += v;
        if dv != 0.0 {
            policy.accumulate_log_prob_grad(&e.state, e.action, scale * dv * r, &mut grad);
        }
    }
    (scale * value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::DivergenceKind;
    use crate::tabular::{random_instance, TabularPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn signal_examples() {
        assert_eq!(learning_signals(&[2.0, 0.5], &DivergenceKind::Kl).unwrap(), vec![-2.5, -0.5]);
        assert_eq!(learning_signals(&[1.0; 3], &DivergenceKind::Kl).unwrap(), vec![-3.0, -2.0, -1.0]);
        assert_eq!(learning_signals(&[1.0; 4], &DivergenceKind::Rkl).unwrap(), vec![4.0, 3.0, 2.0, 1.0]);
        assert!(learning_signals(&[1.0, f64::NAN], &DivergenceKind::Kl).is_err());
    }

    #[test]
    fn recentering_examples() {
        let a = baseline_recenter(&[vec![-2.5, -0.5], vec![-1.5, -0.5]]).unwrap();
        assert_eq!(a[0][0], -0.25);
        assert_eq!(a[1][0], 0.25);
        assert_eq!(a[0][1], 0.0);
        let same = baseline_recenter(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(same.iter().flatten().all(|v| *v == 0.0));
        assert!(baseline_recenter(&[vec![1.0]]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<Vec<f64>> = (0..17).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let r = baseline_recenter(&batch).unwrap();
        for t in 0..5 {
            assert!(r.iter().map(|s| s[t]).sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_scales_to_unit_variance() {
        let mut s = vec![vec![1.0, -1.0], vec![3.0, -3.0]];
        normalize_signals(&mut s);
        let var = s.iter().flatten().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-12);
        let mut zero = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        normalize_signals(&mut zero);
        assert!(zero.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(ppo_term(1.3, -1.0, 0.2), (-1.2, 0.0));
        assert_eq!(ppo_term(1.3, 1.0, 0.2), (1.3, 1.0));
        assert_eq!(ppo_term(1.0, -2.0, 0.0), (-2.0, -2.0));
        assert_eq!(ppo_term(0.5, 1.0, 0.2), (0.8, 0.0));
    }

    fn sampled_episodes(policy: &TabularPolicy, mdp: &crate::tabular::TabularMdp, n: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| mdp.sample_trajectory(policy, &mut rng)).collect()
    }

    #[test]
    fn zero_signals_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mdp, pol, _) = random_instance(&mut rng, 3, 2, 3);
        let eps = sampled_episodes(&pol, &mdp, 10, 2);
        let episodes: Vec<Episode<usize>> = eps.iter().map(|(s, a, l)| Episode { states: s[..a.len()].iter().collect(), actions: a.clone(), logprobs: l.clone() }).collect();
        let g = pg_gradient(&pol, &episodes, &vec![vec![0.0; 3]; 10]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_signals_average_out() {
        // score-function identity: a per-trajectory constant signal has zero expected gradient
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mdp, pol, _) = random_instance(&mut rng, 3, 3, 3);
        let n = 100_000;
        let eps = sampled_episodes(&pol, &mdp, n, 4);
        let episodes: Vec<Episode<usize>> = eps.iter().map(|(s, a, l)| Episode { states: s[..a.len()].iter().collect(), actions: a.clone(), logprobs: l.clone() }).collect();
        let signals = vec![vec![1.0; 3]; n];
        let g = pg_gradient(&pol, &episodes, &signals).unwrap();
        // per-episode contributions give the standard error of each coordinate
        let mut sq = vec![0.0; pol.logits.len()];
        for e in &episodes {
            let one = pg_gradient(&pol, std::slice::from_ref(e), &[vec![1.0; 3]]).unwrap();
            for (s, v) in sq.iter_mut().zip(&one) {
                *s += v * v;
            }
        }
        let se: f64 = sq.iter().map(|s| s / n as f64).sum::<f64>().sqrt() / (n as f64).sqrt();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 3.0 * se, "norm {norm} se {se}");
    }

    #[test]
    fn ppo_at_snapshot_equals_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mdp, pol, _) = random_instance(&mut rng, 4, 3, 4);
        let eps = sampled_episodes(&pol, &mdp, 50, 6);
        let signals: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let adv = baseline_recenter(&signals).unwrap();
        let episodes: Vec<Episode<usize>> = eps.iter().map(|(s, a, l)| Episode { states: s[..a.len()].iter().collect(), actions: a.clone(), logprobs: l.clone() }).collect();
        // recentered signals already carry the 1/T factor
        let scaled: Vec<Vec<f64>> = adv.iter().map(|a| a.iter().map(|v| v * 4.0).collect()).collect();
        let pg = pg_gradient(&pol, &episodes, &scaled).unwrap();
        let mut buffer = Vec::new();
        for (e, (sig, a)) in episodes.iter().zip(signals.iter().zip(&adv)) {
            for t in 0..e.len() {
                buffer.push(BufferEntry { state: *e.states[t], action: e.actions[t], logprob: e.logprobs[t], signal: sig[t], advantage: a[t] });
            }
        }
        let refs: Vec<&BufferEntry<usize>> = buffer.iter().collect();
        for eps_clip in [0.0, 0.2] {
            let (value, g) = ppo_surrogate(&pol, &refs, eps_clip, 1.0 / 50.0);
            let sum_adv: f64 = buffer.iter().map(|b| b.advantage).sum::<f64>() / 50.0;
            assert!((value - sum_adv).abs() < 1e-12);
            for (x, y) in g.iter().zip(&pg) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn importance_weights_are_one_on_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mdp, pol, _) = random_instance(&mut rng, 3, 2, 3);
        let eps = sampled_episodes(&pol, &mdp, 20, 8);
        let episodes: Vec<Episode<usize>> = eps.iter().map(|(s, a, l)| Episode { states: s[..a.len()].iter().collect(), actions: a.clone(), logprobs: l.clone() }).collect();
        for w in importance_weights(&pol, &episodes) {
            assert!((w - 1.0).abs() < 1e-12);
        }
        let signals: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 1.0, -0.5]).collect();
        let base = vec![1.0 / 20.0; 20];
        assert_eq!(is_gradient(&pol, &episodes, &signals, &base).unwrap().len(), pol.logits.len());
        let a = is_gradient(&pol, &episodes, &signals, &base).unwrap();
        let b = pg_gradient(&pol, &episodes, &signals).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
