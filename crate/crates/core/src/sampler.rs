//! Noise schedules and the update operators of the reverse process.
//!
//! Every operator takes the denoiser as a closure `D(x, sigma)` and reports
//! the number of denoiser invocations it performed. The probability-flow
//! slope is `d = (x - D(x, sigma)) / sigma`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::target::GaussianMixture;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Polynomial interpolation in `sigma^(1/rho)` space.
    Power,
    /// Log-uniform spacing.
    Geometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub levels: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    7.0
}

/// Noise levels `Sigma_0 = 0 < Sigma_1 < ... < Sigma_N`. Index `i` is level `Sigma_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// From nonzero levels in decreasing order; `Sigma_0 = 0` is appended.
    pub fn from_decreasing(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(invalid("schedule needs at least one nonzero level"));
        }
        for w in levels.windows(2) {
            if !(w[0] > w[1]) {
                return Err(invalid(format!("schedule levels must strictly decrease: {} then {}", w[0], w[1])));
            }
        }
        let last = levels[levels.len() - 1];
        if !(last > 0.0 && levels[0].is_finite()) {
            return Err(invalid("nonzero schedule levels must be positive and finite"));
        }
        let mut sigmas = vec![0.0];
        sigmas.extend(levels.iter().rev());
        Ok(Self { sigmas })
    }

    pub fn build(spec: &ScheduleSpec) -> Result<Self> {
        build_schedule(spec.kind, spec.levels, spec.sigma_min, spec.sigma_max, spec.rho)
    }

    /// Number `N` of nonzero levels.
    pub fn num_levels(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// `Sigma_i`.
    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 1]
    }

    /// Levels indexed by level number (`[0, Sigma_1, ..., Sigma_N]`).
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Levels in sampling order `[Sigma_N, ..., Sigma_1, 0]`.
    pub fn levels(&self) -> Vec<f64> {
        self.sigmas.iter().rev().copied().collect()
    }

    /// Checks that `Sigma_N >= factor * max component std`, so the initial
    /// Gaussian approximates the noisiest marginal.
    pub fn check_covers(&self, target: &GaussianMixture, factor: f64) -> Result<()> {
        let need = factor * target.max_component_std();
        if self.sigma_max() < need {
            return Err(invalid(format!(
                "sigma_max {} is below {factor} x the largest component std ({need})",
                self.sigma_max()
            )));
        }
        Ok(())
    }
}

/// Schedule with `Sigma_N = sigma_max` and `Sigma_1 = sigma_min`, then `Sigma_0 = 0`.
pub fn build_schedule(kind: ScheduleKind, n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(invalid("schedule needs at least one nonzero level"));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(invalid(format!("need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(invalid(format!("rho must be positive, got {rho}")));
    }
    if n == 1 {
        return NoiseSchedule::from_decreasing(&[sigma_max]);
    }
    let span = (n - 1) as f64;
    let levels: Vec<f64> = (0..n)
        .map(|k| {
            let frac = k as f64 / span;
            if k == 0 {
                sigma_max
            } else if k == n - 1 {
                sigma_min
            } else {
                match kind {
                    ScheduleKind::Power => {
                        let a = sigma_max.powf(1.0 / rho);
                        let b = sigma_min.powf(1.0 / rho);
                        (a + frac * (b - a)).powf(rho)
                    }
                    ScheduleKind::Geometric => (sigma_max.ln() + frac * (sigma_min.ln() - sigma_max.ln())).exp(),
                }
            }
        })
        .collect();
    NoiseSchedule::from_decreasing(&levels)
}

fn check_step(sigma_from: f64, sigma_to: f64) -> Result<()> {
    if !(sigma_to >= 0.0 && sigma_from.is_finite()) {
        return Err(Error::Domain(format!("invalid step {sigma_from} -> {sigma_to}")));
    }
    if sigma_to > sigma_from {
        return Err(invalid(format!("step must not increase noise: {sigma_from} -> {sigma_to}")));
    }
    if sigma_from == 0.0 {
        return Err(Error::Domain("probability-flow slope is undefined at sigma = 0".into()));
    }
    Ok(())
}

fn slope(x: &[f64], denoised: &[f64], sigma: f64) -> Vec<f64> {
    x.iter().zip(denoised).map(|(xi, di)| (xi - di) / sigma).collect()
}

/// First-order step of the probability-flow ODE.
pub fn euler_step<D>(denoiser: D, x: &[f64], sigma_from: f64, sigma_to: f64) -> Result<(Vec<f64>, u32)>
where
    D: Fn(&[f64], f64) -> Vec<f64>,
{
    check_step(sigma_from, sigma_to)?;
    if sigma_from == sigma_to {
        return Ok((x.to_vec(), 0));
    }
    let d = slope(x, &denoiser(x, sigma_from), sigma_from);
    let h = sigma_to - sigma_from;
    Ok((x.iter().zip(&d).map(|(xi, di)| xi + h * di).collect(), 1))
}

/// Second-order (trapezoidal) step; falls back to Euler when `sigma_to = 0`.
pub fn heun_step<D>(denoiser: D, x: &[f64], sigma_from: f64, sigma_to: f64) -> Result<(Vec<f64>, u32)>
where
    D: Fn(&[f64], f64) -> Vec<f64>,
{
    check_step(sigma_from, sigma_to)?;
    if sigma_from == sigma_to {
        return Ok((x.to_vec(), 0));
    }
    let h = sigma_to - sigma_from;
    let d1 = slope(x, &denoiser(x, sigma_from), sigma_from);
    let predicted: Vec<f64> = x.iter().zip(&d1).map(|(xi, di)| xi + h * di).collect();
    if sigma_to == 0.0 {
        return Ok((predicted, 1));
    }
    let d2 = slope(&predicted, &denoiser(&predicted, sigma_to), sigma_to);
    let out = x
        .iter()
        .zip(d1.iter().zip(&d2))
        .map(|(xi, (a, b))| xi + h * 0.5 * (a + b))
        .collect();
    Ok((out, 2))
}

/// Stochastic EDM step: lift the noise level to `sigma_hat = sigma_from (1 + gamma)`
/// by adding fresh noise, then take a Heun step from `sigma_hat` to `sigma_to`.
/// With `gamma = 0` no randomness is consumed and the result equals [`heun_step`].
pub fn edm_stoch_step<D, R>(
    denoiser: D,
    x: &[f64],
    sigma_from: f64,
    sigma_to: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, u32)>
where
    D: Fn(&[f64], f64) -> Vec<f64>,
    R: Rng + ?Sized,
{
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    check_step(sigma_from, sigma_to)?;
    if gamma == 0.0 {
        return heun_step(denoiser, x, sigma_from, sigma_to);
    }
    let sigma_hat = sigma_from * (1.0 + gamma);
    let std = churn_std(sigma_from, gamma);
    let lifted: Vec<f64> = x
        .iter()
        .map(|xi| {
            let z: f64 = StandardNormal.sample(rng);
            xi + std * z
        })
        .collect();
    heun_step(denoiser, &lifted, sigma_hat, sigma_to)
}

/// Standard deviation of the noise added by [`edm_stoch_step`].
pub fn churn_std(sigma: f64, gamma: f64) -> f64 {
    let sigma_hat = sigma * (1.0 + gamma);
    (sigma_hat * sigma_hat - sigma * sigma).sqrt()
}

/// Classifier-free guidance: `(1 + omega) D(x | c) - omega D(x)`.
pub fn guided_denoise(target: &GaussianMixture, x: &[f64], sigma: f64, cond: usize, omega: f64) -> Result<Vec<f64>> {
    let conditional = target.denoise(x, sigma, Some(cond))?;
    if omega == 0.0 {
        return Ok(conditional);
    }
    let unconditional = target.denoise(x, sigma, None)?;
    Ok(conditional
        .iter()
        .zip(&unconditional)
        .map(|(c, u)| (1.0 + omega) * c - omega * u)
        .collect())
}

/// Jump from `sigma_i` back up to `sigma_j > sigma_i` by adding noise of
/// variance `sigma_j^2 - sigma_i^2`.
pub fn renoise<R: Rng + ?Sized>(x: &[f64], sigma_i: f64, sigma_j: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma_i >= 0.0 && sigma_j > sigma_i && sigma_j.is_finite()) {
        return Err(invalid(format!("renoise needs sigma_j > sigma_i >= 0, got {sigma_i} -> {sigma_j}")));
    }
    let std = (sigma_j * sigma_j - sigma_i * sigma_i).sqrt();
    Ok(x
        .iter()
        .map(|xi| {
            let z: f64 = StandardNormal.sample(rng);
            xi + std * z
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_gaussian() -> GaussianMixture {
        GaussianMixture::gaussian(vec![0.0], 1.0).unwrap()
    }

    fn den(g: &GaussianMixture) -> impl Fn(&[f64], f64) -> Vec<f64> + '_ {
        move |x: &[f64], s: f64| g.denoise(x, s, None).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = build_schedule(ScheduleKind::Geometric, 3, 1.0, 4.0, 7.0).unwrap();
        let lv = s.levels();
        assert_eq!(lv.len(), 4);
        assert_eq!(lv[0], 4.0);
        assert!((lv[1] - 2.0).abs() < 1e-12);
        assert_eq!(&lv[2..], &[1.0, 0.0]);

        let s = build_schedule(ScheduleKind::Power, 2, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.levels(), vec![80.0, 0.002, 0.0]);
        assert_eq!(s.num_levels(), 2);
        assert_eq!(s.sigma(0), 0.0);

        assert!(build_schedule(ScheduleKind::Power, 1, 2.0, 2.0, 7.0).is_err());
        assert!(build_schedule(ScheduleKind::Power, 0, 1.0, 2.0, 7.0).is_err());
        assert!(build_schedule(ScheduleKind::Power, 3, 1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn power_schedule_is_strictly_decreasing() {
        let s = build_schedule(ScheduleKind::Power, 18, 0.002, 80.0, 7.0).unwrap();
        let lv = s.levels();
        assert!(lv.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*lv.last().unwrap(), 0.0);
    }

    #[test]
    fn covers_check() {
        let s = build_schedule(ScheduleKind::Power, 8, 0.05, 10.0, 7.0).unwrap();
        let g = GaussianMixture::ring(8, 2.0, 0.1).unwrap();
        assert!(s.check_covers(&g, 10.0).is_ok());
        let wide = GaussianMixture::gaussian(vec![0.0, 0.0], 4.0).unwrap();
        assert!(s.check_covers(&wide, 10.0).is_err());
    }

    #[test]
    fn euler_examples() {
        let g = unit_gaussian();
        let (x, nfe) = euler_step(den(&g), &[2.0], 1.0, 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert_eq!(nfe, 1);
        let (x, _) = euler_step(den(&g), &[2.0], 1.0, 0.5).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-12);
        let (x, nfe) = euler_step(den(&g), &[2.0], 1.0, 1.0).unwrap();
        assert_eq!((x[0], nfe), (2.0, 0));
        assert!(euler_step(den(&g), &[2.0], 0.0, 0.0).is_err());
        assert!(euler_step(den(&g), &[2.0], 0.5, 1.0).is_err());
    }

    #[test]
    fn heun_examples() {
        let g = unit_gaussian();
        let (x, nfe) = heun_step(den(&g), &[2.0], 1.0, 0.5).unwrap();
        assert!((x[0] - 1.6).abs() < 1e-12);
        assert_eq!(nfe, 2);
        let (x, nfe) = heun_step(den(&g), &[2.0], 1.0, 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert_eq!(nfe, 1);

        let exact = 2.0 * ((1.0f64 + 0.25) / 2.0).sqrt();
        let (e, _) = euler_step(den(&g), &[2.0], 1.0, 0.5).unwrap();
        let (h, _) = heun_step(den(&g), &[2.0], 1.0, 0.5).unwrap();
        assert!((h[0] - exact).abs() < (e[0] - exact).abs());
    }

    #[test]
    fn nfe_counts_denoiser_calls() {
        use std::cell::Cell;
        let g = GaussianMixture::ring(4, 1.0, 0.2).unwrap();
        let calls = Cell::new(0u32);
        let counting = |x: &[f64], s: f64| {
            calls.set(calls.get() + 1);
            g.denoise(x, s, None).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (from, to) in [(2.0, 1.0), (1.0, 0.0), (0.7, 0.7)] {
            calls.set(0);
            let (_, n) = euler_step(&counting, &[0.3, 0.1], from, to).unwrap();
            assert_eq!(n, calls.get());
            calls.set(0);
            let (_, n) = heun_step(&counting, &[0.3, 0.1], from, to).unwrap();
            assert_eq!(n, calls.get());
            calls.set(0);
            let (_, n) = edm_stoch_step(&counting, &[0.3, 0.1], from, to, 0.4, &mut rng).unwrap();
            assert_eq!(n, calls.get());
        }
    }

    #[test]
    fn edm_with_zero_gamma_is_heun_and_consumes_no_randomness() {
        let g = GaussianMixture::ring(8, 2.0, 0.1).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let b = a.clone();
        let (x1, n1) = edm_stoch_step(den(&g), &[0.4, -1.2], 2.0, 1.1, 0.0, &mut a).unwrap();
        let (x2, n2) = heun_step(den(&g), &[0.4, -1.2], 2.0, 1.1).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(n1, n2);
        assert_eq!(a, b);
    }

    #[test]
    fn churn_and_renoise_noise_levels() {
        assert!((churn_std(1.0, 0.5) - 1.118034).abs() < 1e-6);
        assert!(renoise(&[0.0], 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(renoise(&[0.0], 1.0, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    fn variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn churn_variance_law() {
        // x ~ N(0, s^2 + 1) lifted to sigma_hat = 1.5 has variance s^2 + 2.25
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s2 = 0.5;
        let std = churn_std(1.0, 0.5);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let z: f64 = StandardNormal.sample(&mut rng);
                a * (s2 + 1.0f64).sqrt() + std * z
            })
            .collect();
        let v = variance(&xs);
        assert!((v / (s2 + 2.25) - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn renoise_preserves_marginal_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s2 = 0.3;
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                renoise(&[a * (s2 + 0.25f64).sqrt()], 0.5, 1.0, &mut rng).unwrap()[0]
            })
            .collect();
        assert!((variance(&xs) / (s2 + 1.0) - 1.0).abs() < 0.02);
    }

    #[test]
    fn guidance_examples() {
        let two = GaussianMixture::new(vec![0.5, 0.5], vec![vec![1.0], vec![-1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        let x = [0.37];
        assert_eq!(guided_denoise(&two, &x, 0.8, 0, 0.0).unwrap(), two.denoise(&x, 0.8, Some(0)).unwrap());
        assert!((guided_denoise(&two, &[0.0], 1.0, 0, 1.0).unwrap()[0] - 1.0).abs() < 1e-12);
        let one = unit_gaussian();
        for omega in [0.5, 2.0, 7.0] {
            let a = guided_denoise(&one, &[1.3], 0.6, 0, omega).unwrap()[0];
            let b = one.denoise(&[1.3], 0.6, None).unwrap()[0];
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn endpoint_errors(steps: usize) -> (f64, f64) {
        // single Gaussian N(0, s^2): exact flow x(sigma) = x0 sqrt((s^2 + sigma^2) / (s^2 + sigma0^2))
        let s2 = 0.25;
        let g = GaussianMixture::gaussian(vec![0.0], s2).unwrap();
        let (hi, lo) = (10.0, 0.1);
        let sched = build_schedule(ScheduleKind::Geometric, steps + 1, lo, hi, 7.0).unwrap();
        let x0 = 3.0;
        let exact = x0 * ((s2 + lo * lo) / (s2 + hi * hi)).sqrt();
        let (mut xe, mut xh) = (vec![x0], vec![x0]);
        for i in (2..=sched.num_levels()).rev() {
            xe = euler_step(den(&g), &xe, sched.sigma(i), sched.sigma(i - 1)).unwrap().0;
            xh = heun_step(den(&g), &xh, sched.sigma(i), sched.sigma(i - 1)).unwrap().0;
        }
        ((xe[0] - exact).abs(), (xh[0] - exact).abs())
    }

    #[test]
    fn convergence_orders() {
        let (e1, h1) = endpoint_errors(16);
        let (e2, h2) = endpoint_errors(32);
        let (re, rh) = (e1 / e2, h1 / h2);
        assert!((1.5..=3.0).contains(&re), "euler ratio {re}");
        assert!((2.5..=6.0).contains(&rh), "heun ratio {rh}");
    }
}
