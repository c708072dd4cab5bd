//! Density-ratio estimation between expert and policy states at each noise level.
//!
//! A binary classifier `D(x, sigma)` is trained with cross-entropy to tell expert
//! states (label 1) from policy states (label 0). At the optimum its logit is
//! `ln p_E(x | sigma) - ln p_theta(x | sigma)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{embedding_sigma, push_scaled_state, push_sigma_embedding, Adam, Mlp, SIGMA_FREQUENCIES};
use crate::target::GaussianMixture;

pub const DEFAULT_RATIO_MIN: f64 = 1e-3;
pub const DEFAULT_RATIO_MAX: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    net: Mlp,
    sigma_data: f64,
    /// Stand-in for `sigma = 0` in the noise embedding.
    sigma_floor: f64,
    ratio_min: f64,
    ratio_max: f64,
}

/// Expert and policy samples observed at one noise level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelSamples {
    pub sigma: f64,
    pub expert: Vec<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorTraining {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Labels become `1 - eps` and `eps` at levels with `sigma >= smoothing_min_sigma`.
    pub label_smoothing: f64,
    pub smoothing_min_sigma: f64,
    /// Linearly anneal the step size to zero over the run.
    #[serde(default = "default_decay")]
    pub decay_lr: bool,
}

fn default_decay() -> bool {
    true
}

impl Default for DiscriminatorTraining {
    fn default() -> Self {
        Self { iters: 500, batch: 256, lr: 3e-3, label_smoothing: 0.05, smoothing_min_sigma: f64::INFINITY, decay_lr: true }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy `-[y ln s(z) + (1-y) ln(1-s(z))]` computed stably from the logit.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    // ln(1 + e^z) - y z
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(dim: usize, sigma_data: f64, sigma_floor: f64, widths: &[usize], rng: &mut R) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_floor > 0.0) {
            return Err(invalid("discriminator needs positive sigma_data and sigma_floor"));
        }
        let mut sizes = vec![dim + 2 * SIGMA_FREQUENCIES];
        sizes.extend(widths);
        sizes.push(1);
        let net = Mlp::new(&sizes, rng)?;
        Ok(Self { net, sigma_data, sigma_floor, ratio_min: DEFAULT_RATIO_MIN, ratio_max: DEFAULT_RATIO_MAX })
    }

    pub fn with_clamp(mut self, ratio_min: f64, ratio_max: f64) -> Result<Self> {
        if !(ratio_min > 0.0 && ratio_max >= ratio_min && ratio_max.is_finite()) {
            return Err(invalid(format!("invalid ratio clamp [{ratio_min}, {ratio_max}]")));
        }
        self.ratio_min = ratio_min;
        self.ratio_max = ratio_max;
        Ok(self)
    }

    pub fn clamp_bounds(&self) -> (f64, f64) {
        (self.ratio_min, self.ratio_max)
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim() - 2 * SIGMA_FREQUENCIES
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    fn features(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.net.input_dim());
        push_scaled_state(&mut out, x, sigma, self.sigma_data);
        push_sigma_embedding(&mut out, embedding_sigma(sigma, self.sigma_floor));
        out
    }

    /// Estimated `ln p_E(x | sigma) / p_theta(x | sigma)`.
    pub fn logit(&self, x: &[f64], sigma: f64) -> f64 {
        self.net.forward(&self.features(x, sigma))[0]
    }

    /// `exp(logit)` clamped to the configured bounds.
    pub fn conditional_ratio(&self, x: &[f64], sigma: f64) -> f64 {
        clamp_ratio(self.logit(x, sigma).exp(), self.ratio_min, self.ratio_max)
    }

    /// Classifier probability that `x` came from the expert.
    pub fn probability(&self, x: &[f64], sigma: f64) -> f64 {
        sigmoid(self.logit(x, sigma))
    }
}

pub fn clamp_ratio(r: f64, lo: f64, hi: f64) -> f64 {
    if r.is_nan() {
        return lo;
    }
    r.clamp(lo, hi)
}

fn smoothed_labels(opts: &DiscriminatorTraining, sigma: f64) -> (f64, f64) {
    if sigma >= opts.smoothing_min_sigma {
        (1.0 - opts.label_smoothing, opts.label_smoothing)
    } else {
        (1.0, 0.0)
    }
}

fn check_levels(levels: &[LevelSamples], dim: usize) -> Result<()> {
    if levels.is_empty() {
        return Err(invalid("no levels to train the discriminator on"));
    }
    for l in levels {
        if l.expert.is_empty() || l.policy.is_empty() {
            return Err(invalid(format!("level sigma={} has no expert or no policy samples", l.sigma)));
        }
        if let Some(bad) = l.expert.iter().chain(&l.policy).find(|x| x.len() != dim) {
            return Err(Error::ShapeMismatch { expected: dim, actual: bad.len() });
        }
    }
    Ok(())
}

/// Minibatch Adam on the cross-entropy loss. Each example draws its level
/// uniformly, then its class with probability one half, then a sample.
pub fn train_discriminator<R: Rng + ?Sized>(
    disc: &mut Discriminator,
    levels: &[LevelSamples],
    opts: &DiscriminatorTraining,
    rng: &mut R,
) -> Result<()> {
    check_levels(levels, disc.dim())?;
    if opts.batch == 0 || !(opts.lr > 0.0) || !(0.0..0.5).contains(&opts.label_smoothing) {
        return Err(invalid("invalid discriminator training options"));
    }
    let mut adam = Adam::new(disc.net.num_params(), opts.lr);
    let mut grad = vec![0.0; disc.net.num_params()];
    for it in 0..opts.iters {
        if opts.decay_lr {
            adam.set_lr(opts.lr * (1.0 - it as f64 / opts.iters as f64));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for b in 0..opts.batch {
            let level = &levels[rng.random_range(0..levels.len())];
            let (pos, neg) = smoothed_labels(opts, level.sigma);
            let (set, y) = if b % 2 == 0 { (&level.expert, pos) } else { (&level.policy, neg) };
            let x = &set[rng.random_range(0..set.len())];
            let trace = disc.net.trace(&disc.features(x, level.sigma));
            let dz = (sigmoid(trace.output()[0]) - y) / opts.batch as f64;
            disc.net.backward(&trace, &[dz], &mut grad);
        }
        adam.step(disc.net.params_mut(), &grad);
    }
    if disc.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("discriminator parameters diverged".into()));
    }
    Ok(())
}

/// Mean cross-entropy over every sample in `levels`, with classes weighted equally per level.
pub fn mean_bce(disc: &Discriminator, levels: &[LevelSamples], opts: &DiscriminatorTraining) -> Result<f64> {
    check_levels(levels, disc.dim())?;
    let mut total = 0.0;
    for l in levels {
        let (pos, neg) = smoothed_labels(opts, l.sigma);
        let e: f64 = l.expert.iter().map(|x| bce_from_logit(disc.logit(x, l.sigma), pos)).sum::<f64>() / l.expert.len() as f64;
        let p: f64 = l.policy.iter().map(|x| bce_from_logit(disc.logit(x, l.sigma), neg)).sum::<f64>() / l.policy.len() as f64;
        total += 0.5 * (e + p);
    }
    Ok(total / levels.len() as f64)
}

/// Exact `p(x | sigma) / q(x | sigma)` for two analytic mixtures.
pub fn exact_ratio_oracle(p: &GaussianMixture, q: &GaussianMixture, x: &[f64], sigma: f64) -> Result<f64> {
    Ok(exact_log_ratio(p, q, x, sigma)?.exp())
}

pub fn exact_log_ratio(p: &GaussianMixture, q: &GaussianMixture, x: &[f64], sigma: f64) -> Result<f64> {
    Ok(p.log_density(x, sigma, None)? - q.log_density(x, sigma, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn level(sigma: f64, p: &GaussianMixture, q: &GaussianMixture, n: usize, rng: &mut ChaCha8Rng) -> LevelSamples {
        LevelSamples {
            sigma,
            expert: p.sample_expert(sigma, n, rng).unwrap(),
            policy: q.sample_expert(sigma, n, rng).unwrap(),
        }
    }

    #[test]
    fn fresh_discriminator_is_neutral() {
        let d = Discriminator::new(2, 1.0, 0.01, &[8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.logit(&[0.3, -1.0], 0.5), 0.0);
        assert_eq!(d.conditional_ratio(&[0.3, -1.0], 0.5), 1.0);
    }

    #[test]
    fn clamp_examples() {
        assert!((clamp_ratio(2f64.ln().exp(), 1e-3, 1e3) - 2.0).abs() < 1e-15);
        assert_eq!(clamp_ratio(20f64.exp(), 1e-3, 1e3), 1e3);
        assert_eq!(clamp_ratio((-20f64).exp(), 1e-3, 1e3), 1e-3);
    }

    #[test]
    fn calibration_identity() {
        for z in [-12.0, -3.0, -0.2, 0.0, 0.7, 5.0, 12.0] {
            let d = sigmoid(z);
            assert!((d / (1.0 - d) / f64::exp(z) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_examples() {
        let p = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
        let q = GaussianMixture::gaussian(vec![0.0], 2.0).unwrap();
        assert!((exact_ratio_oracle(&p, &q, &[0.0], 0.0).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((exact_ratio_oracle(&p, &p, &[0.7], 0.3).unwrap() - 1.0).abs() < 1e-15);
        // mirrored mixtures: ratio at -x is the reciprocal of the ratio at x
        let a = GaussianMixture::new(vec![0.7, 0.3], vec![vec![1.0], vec![-1.0]], vec![vec![0.2], vec![0.2]]).unwrap();
        let b = GaussianMixture::new(vec![0.3, 0.7], vec![vec![1.0], vec![-1.0]], vec![vec![0.2], vec![0.2]]).unwrap();
        for x in [0.1, 0.5, 1.3] {
            let r = exact_ratio_oracle(&a, &b, &[x], 0.1).unwrap() * exact_ratio_oracle(&a, &b, &[-x], 0.1).unwrap();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_classes_give_small_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
        let train = vec![level(0.5, &m, &m, 4000, &mut rng)];
        let mut d = Discriminator::new(1, 1.0, 0.01, &[32, 32], &mut rng).unwrap();
        let opts = DiscriminatorTraining { iters: 400, batch: 128, ..Default::default() };
        train_discriminator(&mut d, &train, &opts, &mut rng).unwrap();
        let held = m.sample_expert(0.5, 1000, &mut rng).unwrap();
        let mean = held.iter().map(|x| d.logit(x, 0.5).abs()).sum::<f64>() / held.len() as f64;
        assert!(mean < 0.1, "mean |logit| {mean}");
    }

    #[test]
    fn gaussian_variance_ratio_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
        let q = GaussianMixture::gaussian(vec![0.0], 2.0).unwrap();
        let train = vec![level(0.0, &p, &q, 20_000, &mut rng)];
        let mut d = Discriminator::new(1, 1.2, 0.01, &[32, 32], &mut rng).unwrap();
        let opts = DiscriminatorTraining { iters: 1500, batch: 256, ..Default::default() };
        train_discriminator(&mut d, &train, &opts, &mut rng).unwrap();
        let z = d.logit(&[0.0], 0.0);
        assert!((z - 2f64.sqrt().ln()).abs() < 0.1, "logit(0) = {z}");
        // sign agreement with the exact log-ratio away from its zero crossings
        let mut agree = 0;
        let mut total = 0;
        for i in 0..=60 {
            let x = -3.0 + 0.1 * i as f64;
            let exact = exact_log_ratio(&p, &q, &[x], 0.0).unwrap();
            if exact.abs() < 0.05 {
                continue;
            }
            total += 1;
            if exact.signum() == d.logit(&[x], 0.0).signum() {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn label_smoothing_bounds_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GaussianMixture::gaussian(vec![-3.0], 0.1).unwrap();
        let q = GaussianMixture::gaussian(vec![3.0], 0.1).unwrap();
        let train = vec![level(1.0, &p, &q, 2000, &mut rng)];
        let mut d = Discriminator::new(1, 1.0, 0.01, &[16, 16], &mut rng).unwrap();
        let opts = DiscriminatorTraining { iters: 1500, batch: 128, lr: 3e-3, label_smoothing: 0.1, smoothing_min_sigma: 0.5, decay_lr: false };
        train_discriminator(&mut d, &train, &opts, &mut rng).unwrap();
        let bound = (0.9f64 / 0.1).ln();
        for x in [-4.0, -3.0, -2.0, 2.0, 3.0, 4.0] {
            let z = d.logit(&[x], 1.0);
            assert!(z.abs() < bound + 0.1, "logit({x}) = {z}");
        }
        assert!(d.logit(&[-3.0], 1.0) > 0.8 * bound);
    }

    #[test]
    fn training_reduces_heldout_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![0.25], vec![0.25]]).unwrap();
        let q = GaussianMixture::new(vec![0.7, 0.3], vec![vec![-0.5], vec![1.5]], vec![vec![0.5], vec![0.3]]).unwrap();
        let train = vec![level(0.0, &p, &q, 5000, &mut rng), level(0.5, &p, &q, 5000, &mut rng)];
        let held = vec![level(0.0, &p, &q, 2000, &mut rng), level(0.5, &p, &q, 2000, &mut rng)];
        let mut d = Discriminator::new(1, 1.0, 0.01, &[32, 32], &mut rng).unwrap();
        let opts = DiscriminatorTraining { iters: 150, batch: 256, lr: 1e-2, ..Default::default() };
        let mut losses = vec![mean_bce(&d, &held, &opts).unwrap()];
        for _ in 0..6 {
            train_discriminator(&mut d, &train, &opts, &mut rng).unwrap();
            losses.push(mean_bce(&d, &held, &opts).unwrap());
        }
        for w in losses.windows(2) {
            assert!(w[1] <= 1.05 * w[0], "{losses:?}");
        }
        let mut oracle = 0.0;
        for l in &held {
            let lr = |x: &Vec<f64>| exact_log_ratio(&p, &q, x, l.sigma).unwrap();
            let e = l.expert.iter().map(|x| bce_from_logit(lr(x), 1.0)).sum::<f64>() / l.expert.len() as f64;
            let n = l.policy.iter().map(|x| bce_from_logit(lr(x), 0.0)).sum::<f64>() / l.policy.len() as f64;
            oracle += 0.25 * (e + n);
        }
        assert!(losses[6] - oracle < 0.25 * (losses[0] - oracle), "{losses:?} vs oracle {oracle}");
    }

    #[test]
    fn empty_level_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Discriminator::new(1, 1.0, 0.01, &[4], &mut rng).unwrap();
        let bad = vec![LevelSamples { sigma: 1.0, expert: vec![vec![0.0]], policy: vec![] }];
        assert!(train_discriminator(&mut d, &bad, &DiscriminatorTraining::default(), &mut rng).is_err());
    }
}
