//! The full training loop: alternate rollouts, ratio-estimator refits and
//! clipped policy-gradient updates from a replay buffer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, OptimizerKind};
use crate::divergence::f_value;
use crate::error::{Error, Result};
use crate::learner::{baseline_recenter, episode_of, is_gradient, learning_signals, normalize_signals, ppo_surrogate, BufferEntry};
use crate::mdp::{rollout_batch, SamplingEnv, State, Trajectory};
use crate::metrics::{energy_distance, final_samples, mean_nfe};
use crate::nn::{sgd_step, Adam};
use crate::occupancy::{default_terminal_mass, estimate_level_weights, expert_level_weights, LevelWeights, OccupancyRatio};
use crate::policy::{entropy, Ema, SamplingPolicy, ScoreFunction};
use crate::ratio::{train_discriminator, Discriminator, DiscriminatorTraining, LevelSamples};
use crate::rng::{derive_seed, stream_rng, StreamTag};
use crate::target::GaussianMixture;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of `f(mu_E / mu_theta)` over the current rollout states.
    pub divergence_estimate: f64,
    pub surrogate_loss: f64,
    pub mean_nfe: f64,
    pub w_theta_terminal: f64,
    /// Mean policy entropy over the buffer states after the epoch's updates.
    pub policy_entropy: f64,
    /// Energy distance of the rollout's final samples to held-out expert samples.
    pub energy_distance: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,divergence_estimate,surrogate_loss,mean_nfe,w_theta_terminal,policy_entropy,energy_distance,wall_time_s";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.divergence_estimate,
            self.surrogate_loss,
            self.mean_nfe,
            self.w_theta_terminal,
            self.policy_entropy,
            self.energy_distance,
            self.wall_time_s
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: SamplingPolicy,
    /// Policy carrying the EMA parameters.
    pub ema: SamplingPolicy,
    pub discriminator: Discriminator,
    pub metrics: Vec<EpochMetrics>,
    /// Expert weight on the terminal level that was used.
    pub terminal_mass: f64,
}

/// Rollout statistics and learning signals frozen at `theta_0`.
struct Batch {
    trajectories: Vec<Trajectory>,
    /// `T * A_hat`, one row per trajectory.
    scaled: Vec<Vec<f64>>,
    buffer: Vec<BufferEntry<State>>,
    divergence_estimate: f64,
    mean_nfe: f64,
    w_theta_terminal: f64,
    energy_distance: f64,
}

enum Optimizer {
    Adam(Adam),
    Sgd(f64),
}

impl Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Adam(a) => a.step(params, grad),
            Optimizer::Sgd(lr) => sgd_step(params, grad, *lr),
        }
    }
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    env: SamplingEnv,
    w_expert: LevelWeights,
    expert_levels: Vec<Vec<Vec<f64>>>,
    eval_expert: Vec<Vec<f64>>,
    disc: Discriminator,
    fits: usize,
}

impl Trainer<'_> {
    fn refresh(&mut self, policy: &SamplingPolicy, round: u64) -> Result<Batch> {
        let cfg = self.cfg;
        let n = self.env.schedule().num_levels();
        let horizon = self.env.horizon();
        let trajectories = rollout_batch(&self.env, policy, 1.0, cfg.learner.n_traj, derive_seed(cfg.seed, StreamTag::Rollout, round))?;
        let w_policy = estimate_level_weights(&trajectories, n)?;
        let sigmas = self.env.schedule().sigmas().to_vec();

        let mut visited: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n + 1];
        for traj in &trajectories {
            for s in &traj.states {
                visited[s.level].push(s.x.clone());
            }
        }
        let levels: Vec<LevelSamples> = visited
            .into_iter()
            .enumerate()
            .filter(|(_, xs)| !xs.is_empty())
            .map(|(i, xs)| LevelSamples { sigma: sigmas[i], expert: self.expert_levels[i].clone(), policy: xs })
            .collect();
        let d = &cfg.discriminator;
        let opts = DiscriminatorTraining {
            iters: if self.fits == 0 { d.dre_init_iters } else { d.iters },
            batch: d.batch,
            lr: d.lr,
            label_smoothing: d.label_smoothing,
            smoothing_min_sigma: d.smoothing_threshold * self.env.schedule().sigma_max(),
            decay_lr: true,
        };
        train_discriminator(&mut self.disc, &levels, &opts, &mut stream_rng(cfg.seed, StreamTag::Discriminator, round))?;
        self.fits += 1;

        let occ = OccupancyRatio::new(self.w_expert.clone(), w_policy.clone(), sigmas, d.ratio_min, d.ratio_max)?;
        let gen = cfg.objective.divergence;
        let disc = &self.disc;
        let ratios: Vec<Vec<f64>> = trajectories
            .par_iter()
            .map(|traj| traj.states.iter().map(|s| occ.ratio(disc, s)).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        let mut f_sum = 0.0;
        let mut count = 0usize;
        for row in &ratios {
            for r in row {
                f_sum += f_value(&gen, *r)?;
                count += 1;
            }
        }
        let signals: Vec<Vec<f64>> = ratios.iter().map(|r| learning_signals(r, &gen)).collect::<Result<_>>()?;
        let mut advantages = baseline_recenter(&signals)?;
        if cfg.learner.normalize_signals {
            normalize_signals(&mut advantages);
        }
        let mut buffer = Vec::with_capacity(trajectories.len() * horizon);
        for ((traj, sig), adv) in trajectories.iter().zip(&signals).zip(&advantages) {
            for t in 0..traj.len() {
                buffer.push(BufferEntry {
                    state: traj.decision_state(t).clone(),
                    action: traj.actions[t],
                    logprob: traj.logprobs[t],
                    signal: sig[t],
                    advantage: adv[t],
                });
            }
        }
        let scaled = advantages.iter().map(|row| row.iter().map(|a| a * horizon as f64).collect()).collect();
        let energy = energy_distance(&final_samples(&trajectories), &self.eval_expert)?;
        Ok(Batch {
            mean_nfe: mean_nfe(&trajectories)?,
            w_theta_terminal: w_policy.terminal(),
            divergence_estimate: f_sum / count as f64,
            energy_distance: energy,
            trajectories,
            scaled,
            buffer,
        })
    }
}

fn mean_entropy(policy: &SamplingPolicy, buffer: &[BufferEntry<State>]) -> Result<f64> {
    let values: Vec<f64> = buffer.par_iter().map(|e| entropy(&policy.probabilities(&e.state))).collect();
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty buffer".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Runs the configured experiment to completion.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with_progress(cfg, |_| {})
}

/// Like [`train`], calling `progress` after every epoch.
pub fn train_with_progress<F: FnMut(&EpochMetrics)>(cfg: &ExperimentConfig, mut progress: F) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let env = cfg.build_env()?;
    let target: GaussianMixture = cfg.target_mixture()?;
    let n = env.schedule().num_levels();
    let horizon = env.horizon();
    let terminal_mass = cfg.objective.w_e_terminal_mass.unwrap_or_else(|| default_terminal_mass(n, horizon));
    let w_expert = expert_level_weights(n, terminal_mass)?;

    let mut policy = SamplingPolicy::new(&cfg.policy, &env, &mut stream_rng(cfg.seed, StreamTag::PolicyInit, 0))?;
    let d = &cfg.discriminator;
    let disc = Discriminator::new(
        env.dim(),
        target.data_std(),
        0.5 * env.schedule().sigma(1),
        &d.widths,
        &mut stream_rng(cfg.seed, StreamTag::DiscriminatorInit, 0),
    )?
    .with_clamp(d.ratio_min, d.ratio_max)?;
    let expert_levels = (0..=n)
        .map(|i| target.sample_expert(env.schedule().sigma(i), d.expert_samples, &mut stream_rng(cfg.seed, StreamTag::Expert, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let eval_expert = target.sample_expert(0.0, cfg.eval.n_expert, &mut stream_rng(cfg.seed, StreamTag::Evaluation, 0))?;

    let l = &cfg.learner;
    let mut opt = match l.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(policy.num_params(), l.lr)),
        OptimizerKind::Sgd => Optimizer::Sgd(l.lr),
    };
    let mut ema = Ema::new(policy.params(), l.ema_decay)?;
    let mut trainer = Trainer { cfg, env, w_expert, expert_levels, eval_expert, disc, fits: 0 };
    let mut batch: Option<Batch> = None;
    let mut metrics = Vec::with_capacity(l.n_epoch);

    for epoch in 0..l.n_epoch {
        if l.exact_refresh || epoch % l.k == 0 || batch.is_none() {
            batch = Some(trainer.refresh(&policy, epoch as u64)?);
        }
        let b = batch.as_ref().expect("batch was just filled");
        let surrogate_loss = if l.importance_sampling {
            let episodes: Vec<_> = b.trajectories.iter().map(episode_of).collect();
            let base = vec![1.0 / episodes.len() as f64; episodes.len()];
            let grad = is_gradient(&policy, &episodes, &b.scaled, &base)?;
            let weights = crate::learner::importance_weights(&policy, &episodes);
            let value = weights.iter().zip(&b.scaled).map(|(w, s)| w * s.iter().sum::<f64>()).sum::<f64>() / (horizon * episodes.len()) as f64;
            opt.step(policy.params_mut(), &grad);
            policy.check_finite()?;
            ema.update(policy.params())?;
            value
        } else {
            let mut order: Vec<usize> = (0..b.buffer.len()).collect();
            order.shuffle(&mut stream_rng(cfg.seed, StreamTag::Shuffle, epoch as u64));
            let mut total = 0.0;
            let mut chunks = 0usize;
            for chunk in order.chunks(l.minibatch) {
                let entries: Vec<&BufferEntry<State>> = chunk.iter().map(|i| &b.buffer[*i]).collect();
                let scale = horizon as f64 / entries.len() as f64;
                let (value, grad) = ppo_surrogate(&policy, &entries, l.ppo_epsilon, scale);
                opt.step(policy.params_mut(), &grad);
                policy.check_finite().map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
                ema.update(policy.params())?;
                total += value;
                chunks += 1;
            }
            total / chunks as f64
        };
        let row = EpochMetrics {
            epoch,
            divergence_estimate: b.divergence_estimate,
            surrogate_loss,
            mean_nfe: b.mean_nfe,
            w_theta_terminal: b.w_theta_terminal,
            policy_entropy: mean_entropy(&policy, &b.buffer)?,
            energy_distance: b.energy_distance,
            wall_time_s: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        progress(&row);
        metrics.push(row);
    }

    let ema_policy = policy.with_params(&ema.shadow)?;
    Ok(TrainOutcome { policy, ema: ema_policy, discriminator: trainer.disc, metrics, terminal_mass })
}
