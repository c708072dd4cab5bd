//! Analytic checks for the sampler and the ratio estimator.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::ratio::{exact_log_ratio, train_discriminator, Discriminator, DiscriminatorTraining, LevelSamples};
use crate::sampler::{euler_step, heun_step};
use crate::target::GaussianMixture;

/// Endpoint errors of Euler and Heun integration against the closed-form flow of a
/// zero-mean Gaussian with standard deviation `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderCheck {
    pub steps: Vec<usize>,
    pub euler_errors: Vec<f64>,
    pub heun_errors: Vec<f64>,
}

impl OrderCheck {
    /// `error(n) / error(2n)` for consecutive step counts.
    pub fn euler_ratios(&self) -> Vec<f64> {
        self.euler_errors.windows(2).map(|w| w[0] / w[1]).collect()
    }

    pub fn heun_ratios(&self) -> Vec<f64> {
        self.heun_errors.windows(2).map(|w| w[0] / w[1]).collect()
    }
}

/// `x(sigma_to)` for a start point `x(sigma_from)` under the exact probability flow of `N(0, s^2)`.
pub fn gaussian_flow(x: f64, s: f64, sigma_from: f64, sigma_to: f64) -> f64 {
    x * ((s * s + sigma_to * sigma_to) / (s * s + sigma_from * sigma_from)).sqrt()
}

/// Integrates from `sigma_max` to `sigma_min` on uniform grids of `base, 2 base, 4 base, ...` steps.
pub fn integrator_order(s: f64, sigma_min: f64, sigma_max: f64, x0: f64, base: usize, halvings: usize) -> Result<OrderCheck> {
    if !(s > 0.0 && sigma_min > 0.0 && sigma_max > sigma_min) || base == 0 {
        return Err(invalid("need s > 0, 0 < sigma_min < sigma_max and at least one step"));
    }
    let g = GaussianMixture::gaussian(vec![0.0], s * s)?;
    let den = |x: &[f64], sigma: f64| g.denoise(x, sigma, None).expect("valid noise level");
    let exact = gaussian_flow(x0, s, sigma_max, sigma_min);
    let mut out = OrderCheck { steps: Vec::new(), euler_errors: Vec::new(), heun_errors: Vec::new() };
    for k in 0..=halvings {
        let n = base << k;
        let grid: Vec<f64> = (0..=n).map(|i| sigma_max + (sigma_min - sigma_max) * i as f64 / n as f64).collect();
        let (mut xe, mut xh) = (vec![x0], vec![x0]);
        for w in grid.windows(2) {
            xe = euler_step(den, &xe, w[0], w[1])?.0;
            xh = heun_step(den, &xh, w[0], w[1])?.0;
        }
        out.steps.push(n);
        out.euler_errors.push((xe[0] - exact).abs());
        out.heun_errors.push((xh[0] - exact).abs());
    }
    Ok(out)
}

/// Trains a discriminator on samples of `expert` and `policy` at `sigma = 0` and
/// returns the mean absolute logit error over a grid of the region where both
/// densities exceed `1%` of their maximum.
pub fn ratio_fidelity<R: Rng + ?Sized>(
    expert: &GaussianMixture,
    policy: &GaussianMixture,
    samples: usize,
    widths: &[usize],
    opts: &DiscriminatorTraining,
    range: (f64, f64),
    rng: &mut R,
) -> Result<f64> {
    if expert.dim() != 1 || policy.dim() != 1 {
        return Err(invalid("fidelity check is one-dimensional"));
    }
    let levels = vec![LevelSamples {
        sigma: 0.0,
        expert: expert.sample_expert(0.0, samples, rng)?,
        policy: policy.sample_expert(0.0, samples, rng)?,
    }];
    let mut disc = Discriminator::new(1, expert.data_std(), 0.01, widths, rng)?;
    train_discriminator(&mut disc, &levels, opts, rng)?;

    let grid: Vec<f64> = (0..=1000).map(|i| range.0 + (range.1 - range.0) * i as f64 / 1000.0).collect();
    let le: Vec<f64> = grid.iter().map(|x| expert.log_density(&[*x], 0.0, None)).collect::<Result<_>>()?;
    let lp: Vec<f64> = grid.iter().map(|x| policy.log_density(&[*x], 0.0, None)).collect::<Result<_>>()?;
    let cut = 0.01f64.ln();
    let (me, mp) = (le.iter().cloned().fold(f64::MIN, f64::max), lp.iter().cloned().fold(f64::MIN, f64::max));
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, x) in grid.iter().enumerate() {
        if le[i] > me + cut && lp[i] > mp + cut {
            total += (disc.logit(&[*x], 0.0) - exact_log_ratio(expert, policy, &[*x], 0.0)?).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("densities share no high-density region on the grid"));
    }
    Ok(total / count as f64)
}
